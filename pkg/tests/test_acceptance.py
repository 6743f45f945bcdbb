"""End-to-end acceptance checks, one marked group per criterion.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary for one PASS/FAIL line per criterion.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from rramdc import topologies as T
from rramdc.cost import PUBLISHED_COSTS, estimate, table_anchor
from rramdc.crossbar import faulty_logits, inject_sa1, map_network, quantized_model
from rramdc.dropconnect import apply_drop_connect, sample_mask, update_var
from rramdc.engine import LayerSpec, Model, NetworkSpec
from rramdc.engine import functional as F
from rramdc.engine.gradcheck import numerical_grad, relative_error
from rramdc.harness import SweepSpec, best_rates, criticality_experiment, run_sweep
from rramdc.train import TrainConfig
from rramdc.transforms import WidenConfig, expand_shortcut_model, transplant, widen

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK_TRAIN = TrainConfig(epochs=20)
INSTANCES = 20


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- gradients -------------------------------------------------------------------


def _conv_case(g):
    groups = int(g.choice([1, 2]))
    c_in = 2 * int(g.integers(1, 3))
    c_out = groups * int(g.integers(1, 3))
    k = int(g.choice([1, 3]))
    stride = int(g.choice([1, 2]))
    layer = LayerSpec("l", "conv2d", ("input",), c_in, c_out, k, stride, k // 2 * int(g.integers(0, 2)), groups,
                      bool(g.integers(0, 2)))
    return (c_in, 5, 5), (layer,)


def _depthwise_case(g):
    c = int(g.integers(2, 5))
    return (c, 5, 5), (LayerSpec("l", "conv2d", ("input",), c, c, 3, int(g.choice([1, 2])), 1, c),)


def _batchnorm_case(g):
    c = int(g.integers(1, 4))
    return (c, 3, 3), (LayerSpec("l", "batchnorm", ("input",), c, c),)


def _relu_case(g):
    return (int(g.integers(1, 4)), 4, 4), (LayerSpec("l", "relu", ("input",)),)


def _avgpool_case(g):
    return (int(g.integers(1, 4)), 4, 4), (LayerSpec("l", "avgpool", ("input",), kernel=int(g.choice([0, 2]))),)


def _fc_case(g):
    c = int(g.integers(1, 3))
    return (c, 3, 3), (LayerSpec("l", "fc", ("input",), c * 9, int(g.integers(2, 6)), bias=bool(g.integers(0, 2))),)


def _residual_case(g):
    c = int(g.integers(1, 4))
    return (c, 4, 4), (
        LayerSpec("a", "conv2d", ("input",), c, c, 3, 1, 1),
        LayerSpec("l", "residual-add", ("a", "input")),
    )


CASES = {
    "conv2d": _conv_case,
    "conv2d-depthwise": _depthwise_case,
    "batchnorm": _batchnorm_case,
    "relu": _relu_case,
    "avgpool": _avgpool_case,
    "fc": _fc_case,
    "residual-add": _residual_case,
}


def _check_layer_instance(kind, g):
    input_shape, layers = CASES[kind](g)
    model = Model(NetworkSpec(f"gc-{kind}", input_shape, layers).validate(), seed=int(g.integers(1 << 30)))
    for t in model.params.values():
        t.data[...] = g.standard_normal(t.data.shape)
    x = g.standard_normal((3, *input_shape))
    if kind == "relu":
        x += np.sign(x) * 0.05  # keep finite differences away from the kink
    r = g.standard_normal(model.forward(x, training=True).shape)

    def loss():
        return float(np.sum(model.forward(x, training=True) * r))

    model.forward(x, training=True)
    grads = model.backward(r)
    errs = [relative_error(model.input_grad, numerical_grad(loss, x))]
    errs += [relative_error(grads[name], numerical_grad(loss, t.data)) for name, t in model.params.items()]
    return max(errs)


def _check_xent_instance(g):
    n, k = int(g.integers(2, 6)), int(g.integers(2, 8))
    logits = 3 * g.standard_normal((n, k))
    labels = g.integers(0, k, n)
    _, grad = F.softmax_xent(logits, labels)
    return relative_error(grad, numerical_grad(lambda: F.softmax_xent(logits, labels)[0], logits))


@criterion(1, "finite-difference gradients for every layer kind")
def test_gradients(record_property):
    g = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {kind: max(_check_layer_instance(kind, g) for _ in range(INSTANCES)) for kind in CASES}
    worst["softmax-xent"] = max(_check_xent_instance(g) for _ in range(INSTANCES))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst rel err {max(worst.values()):.1e} over {INSTANCES} instances x {len(worst)} kinds, {elapsed:.1f}s")
    assert all(err <= 1e-4 for err in worst.values()), worst
    assert elapsed < 60


# -- drop-connect expectation ----------------------------------------------------


@criterion(2, "drop-connect output is unbiased over 20,000 masks")
def test_dropconnect_expectation(record_property):
    # positive operands: every output is a sum of like-signed terms, so the
    # relative error is not dominated by cancellation near zero
    g = np.random.default_rng(7)
    x = g.uniform(0.5, 1.5, (1, 4, 4, 4))
    w = g.uniform(0.5, 1.5, (3, 4, 3, 3))
    exact = F.conv2d_forward(x, w, 1, 1)
    start = time.perf_counter()
    worst = {}
    for p in (0.1, 0.3, 0.5):
        rng = np.random.default_rng(int(p * 10))
        acc = np.zeros_like(exact)
        for _ in range(20_000):
            acc += apply_drop_connect(x, w, sample_mask(w.shape, p, rng), p, 1, 1)
        worst[p] = float(np.max(np.abs(acc / 20_000 - exact) / np.abs(exact)))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"p={p}: {e:.2%}" for p, e in worst.items()) + f", {elapsed:.1f}s")
    assert all(e <= 0.01 for e in worst.values())
    assert elapsed < 300


# -- recalibration ---------------------------------------------------------------


@criterion(3, "recalibration leaves weights untouched and moves BN statistics")
def test_updatevar_freeze(trained, digits, record_property):
    model = trained("desk-resnet", p=0.3)
    before = model.weights_hash()
    snaps = update_var(model, digits)
    assert sorted(snaps) == [0.0, 0.1, 0.2, 0.3]
    for snap in snaps.values():
        assert snap.weights_hash() == before
    base = snaps[0.0].buffers
    moved = {pp: sum(not np.array_equal(base[k], snaps[pp].buffers[k]) for k in base) for pp in (0.1, 0.2, 0.3)}
    record_property("detail", f"BN buffers changed vs p'=0: {moved} of {len(base)}")
    assert all(n > 0 for n in moved.values())


# -- fault injection ---------------------------------------------------------------


@criterion(4, "SA1 counts within 3 sigma and fault maps seed-reproducible")
def test_fault_statistics(tmp_path, record_property):
    arrays = map_network(Model(T.desk_resnet(), seed=0))
    n = arrays.n_cells
    inside = {}
    for f in (0.1, 0.2, 0.3):
        sigma = math.sqrt(n * f * (1 - f))
        inside[f] = sum(abs(inject_sa1(arrays, f, seed).count - n * f) <= 3 * sigma for seed in range(100))
    for seed in (0, 1, 99):
        inject_sa1(arrays, 0.2, seed).save(tmp_path / "a.txt")
        inject_sa1(arrays, 0.2, seed).save(tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    record_property("detail", f"{n} cells; within 3 sigma: " + ", ".join(f"f={f}: {k}/100" for f, k in inside.items()))
    assert all(k >= 99 for k in inside.values())


# -- no-fault equivalence ----------------------------------------------------------


@criterion(5, "fault-free crossbar inference equals quantized host inference")
def test_no_fault_equivalence(trained, digits, record_property):
    model = trained("desk-resnet", p=0.3)
    x = np.concatenate([digits.x_test, digits.x_train])[:1000]
    assert len(x) == 1000
    arrays = map_network(model)
    crossbar = faulty_logits(model, x, arrays, inject_sa1(arrays, 0.0, 0), scale_correction=False)
    host = quantized_model(model, arrays).forward(x)
    agree = float(np.mean(crossbar.argmax(axis=1) == host.argmax(axis=1)))
    record_property("detail", f"argmax agreement {agree:.1%}, max |logit diff| {np.max(np.abs(crossbar - host)):.1e}")
    assert agree == 1.0


# -- desk-scale sweeps -----------------------------------------------------------


@pytest.fixture(scope="session")
def sweep_dir(tmp_path_factory):
    """Shared output directory so sweeps reuse each other's checkpoints."""
    return tmp_path_factory.mktemp("acceptance-sweep")


@criterion(6, "drop-connect beats plain training at f=0.2 on a desk net")
def test_directional_dropconnect(digits, sweep_dir, record_property):
    spec = SweepSpec.load(CONFIGS / "sweep_desk.json")
    assert T.get_network(spec.net).num_params() <= 100_000
    start = time.perf_counter()
    records = run_sweep(spec, digits, out_dir=sweep_dir)
    elapsed = time.perf_counter() - start
    at_f = {r.dc_rate: r.mean for r in records if r.fault_rate == 0.2}
    best = best_rates(records, spec.net)[(0.0, 0.2)]
    record_property(
        "detail",
        f"plain {at_f[0.0]:.3f}, best DC {best.mean:.3f} at p={best.dc_rate}, sweep {elapsed / 60:.1f} min",
    )
    assert best.mean - at_f[0.0] >= 0.05
    assert best.dc_rate >= 0.2
    assert elapsed < 3600


@criterion(7, "host-placed 1x1 layers beat all-RRAM placement at f=0.2")
def test_criticality(digits, record_property):
    res = criticality_experiment("desk-mobilenet", digits, (0.0, 0.2), dc_rate=0.3, crossbars=100, train=DESK_TRAIN)
    for d, a in zip(res.default, res.all_rram):
        assert d.fault_seed == a.fault_seed and d.faultmaps == a.faultmaps
    gap = res.gaps()[0.2]
    record_property("detail", f"desk-mobilenet gap {gap * 100:.1f} points")
    assert gap >= 0.10


@criterion(8, "1.2x widened desk net keeps accuracy at f=0.2 and costs more")
def test_widening(digits, sweep_dir, record_property):
    base = SweepSpec.load(CONFIGS / "sweep_desk.json")
    spec = SweepSpec(
        net=base.net, widths=(0.0, 0.2), dc_rates=(0.3,), fault_rates=(0.2,), crossbars=100, train=base.train
    )
    narrow, wide = run_sweep(spec, digits, out_dir=sweep_dir)
    record_property(
        "detail",
        f"1x {narrow.mean:.3f} vs 1.2x {wide.mean:.3f}; latency {narrow.latency:.3f} -> {wide.latency:.3f}",
    )
    assert (narrow.width, wide.width) == (0.0, 0.2)
    assert wide.mean >= narrow.mean - 0.01
    assert wide.latency > narrow.latency and wide.energy > narrow.energy


# -- cost model --------------------------------------------------------------------


@criterion(9, "calibrated cost model predicts widened ResNet20/VGG13 rows within 10%")
def test_published_cost_rows(record_property):
    start = time.perf_counter()
    worst = 0.0
    for name in ("resnet20", "vgg13"):
        params = table_anchor(name).calibrate()
        for width in (1.2, 1.4, 1.6):
            spec = widen(T.get_network(name), WidenConfig(round(width - 1, 10)))
            lat, en = estimate(spec, None, params)
            t_lat, t_en = PUBLISHED_COSTS[name][width]
            worst = max(worst, abs(lat / t_lat - 1), abs(en / t_en - 1))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst deviation {worst:.1%}, {elapsed * 1000:.0f} ms")
    assert worst <= 0.10
    assert elapsed < 1.0


# -- transforms --------------------------------------------------------------------


@criterion(10, "identity transforms preserve outputs; 16 channels widen to 19")
def test_transform_identities(record_property):
    g = np.random.default_rng(10)
    worst = 0.0
    for name in ("desk-resnet", "desk-mobilenet"):
        model = Model(T.get_network(name), seed=3)
        x = g.standard_normal((100, *model.spec.input_shape))
        ref = model.forward(x)
        same = transplant(model, widen(model.spec, WidenConfig(0.0)))
        worst = max(worst, float(np.max(np.abs(same.forward(x) - ref))))
        if name == "desk-resnet":
            expanded = expand_shortcut_model(model, init="center")
            assert expanded.spec != model.spec
            worst = max(worst, float(np.max(np.abs(expanded.forward(x) - ref))))
    record_property("detail", f"max |output diff| {worst:.1e}")
    assert worst <= 1e-12
    assert WidenConfig(0.2).channels(16) == 19
    assert widen(T.resnet20(), WidenConfig(0.2))["stem.conv"].out_channels == 19
