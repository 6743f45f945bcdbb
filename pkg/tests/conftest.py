import numpy as np
import pytest

from rramdc import topologies as T
from rramdc.data import load_digits
from rramdc.dropconnect import DropConnectConfig
from rramdc.train import TrainConfig, train_with_drop_connect
from rramdc.transforms import WidenConfig, widen

DESK_EPOCHS = 20


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def digits():
    return load_digits()


@pytest.fixture(scope="session")
def trained(digits):
    """Memoized desk-scale training on the digits split, shared across modules."""
    cache = {}

    def get(net="desk-resnet", p=0.0, applies_to="spatial", width=0.0):
        key = (net, p, applies_to, width)
        if key not in cache:
            spec = widen(T.get_network(net), WidenConfig(width))
            dc = DropConnectConfig(p=p, applies_to=applies_to)
            cache[key] = train_with_drop_connect(spec, digits, dc, TrainConfig(epochs=DESK_EPOCHS)).model
        return cache[key]

    return get


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["details"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:2d} {status}: {entry['title']}" + (f" ({detail})" if detail else ""))
