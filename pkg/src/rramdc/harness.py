"""Experiment grids: fault rate x drop-connect rate x width x placement.

A sweep trains one model per (drop-connect rate, width, placement) group,
recalibrates its batch-norm statistics for the fault rates of the grid and
runs a Monte-Carlo crossbar evaluation for every cell. Each finished cell is
written to ``<out_dir>/cells/<key>.json`` together with everything needed to
recompute it, so an interrupted sweep resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cost import Anchor, CostModelParams, calibrate, estimate
from .crossbar import CrossbarArray, inject_sa1, map_network, monte_carlo_eval
from .data import Dataset, get_dataset
from .dropconnect import DEFAULT_P_PRIMES, DropConnectConfig, RecalibrationConfig, select_snapshot, update_var
from .engine import checkpoint
from .engine.model import Model
from .engine.network import NetworkSpec
from .topologies import get_network
from .train import TrainConfig, train_with_drop_connect
from .transforms import WidenConfig, plan_placement, widen

logger = logging.getLogger(__name__)

DEFAULT_FAULT_RATES = (0.0, 0.1, 0.2, 0.3)
DEFAULT_DC_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    net: str = "desk-resnet"
    dataset: str = "digits"
    fault_rates: tuple[float, ...] = DEFAULT_FAULT_RATES
    dc_rates: tuple[float, ...] = DEFAULT_DC_RATES
    widths: tuple[float, ...] = (0.0,)
    placements: tuple[str, ...] = ("default",)
    crossbars: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    mask_seed: int = 0
    fault_seed: int = 0
    p_primes: tuple[float, ...] = DEFAULT_P_PRIMES
    recalibration_seed: int = 0
    scale_correction: bool = True
    fault_mode: str = "iid"
    # reference configuration for absolute cost figures; None reports cost
    # relative to the unwidened net (1.0 latency and energy at width 1x)
    cost_anchor: Optional[Anchor] = None

    def __post_init__(self):
        for name in ("fault_rates", "dc_rates", "widths", "placements"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid axis {name!r} is empty")
        if self.crossbars < 1:
            raise ValueError("need at least one crossbar per cell")
        for pl in self.placements:
            if pl not in ("default", "all-rram"):
                raise ValueError(f"unknown placement {pl!r}")

    def cells(self) -> list[tuple[float, str, float, float]]:
        """All (width, placement, dc rate, fault rate) cells in canonical order."""
        return list(product(self.widths, self.placements, self.dc_rates, self.fault_rates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_anchor"] = asdict(self.cost_anchor) if self.cost_anchor else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if d.get("cost_anchor"):
            d["cost_anchor"] = Anchor(**d["cost_anchor"])
        for name in ("fault_rates", "dc_rates", "widths", "placements", "p_primes"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "SweepSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SweepRecord:
    net: str
    width: float
    placement: str
    dc_rate: float
    fault_rate: float
    p_prime: float
    crossbars: int
    mean: float
    std: float
    min: float
    max: float
    clean_accuracy: float
    latency: float
    energy: float
    params: int
    train_seed: int
    mask_seed: int
    fault_seed: int  # first seed of the cell's consecutive range
    checkpoint: str  # sha256 of the trained weights
    faultmaps: str  # sha256 over every fault map of the cell, in seed order

    def key(self) -> str:
        return cell_key(self.width, self.placement, self.dc_rate, self.fault_rate)


RECORD_COLUMNS = tuple(f.name for f in fields(SweepRecord))
_FIELD_TYPES = {f.name: f.type for f in fields(SweepRecord)}


def cell_key(width: float, placement: str, dc_rate: float, fault_rate: float) -> str:
    return f"w{width!r}_{placement}_dc{dc_rate!r}_f{fault_rate!r}"


def faultmap_digest(arrays: CrossbarArray, f: float, seeds: Sequence[int], mode: str = "iid") -> str:
    h = hashlib.sha256()
    for s in seeds:
        h.update(np.packbits(inject_sa1(arrays, f, s, mode).faulty).tobytes())
    return h.hexdigest()


def train_policy(placement: str) -> str:
    # the all-rram arm also drop-connects the 1x1 layers it puts on the crossbar
    return "all-conv" if placement == "all-rram" else "spatial"


def _cost_params(spec: SweepSpec, base: NetworkSpec) -> CostModelParams:
    if spec.cost_anchor is not None:
        return spec.cost_anchor.calibrate()
    return calibrate(CostModelParams(), base, plan_placement(base), 1.0, 1.0)


@dataclass
class _Group:
    """Everything one worker needs to produce the cells of one trained model."""

    spec: SweepSpec
    width: float
    placement: str
    dc_rate: float
    cells: list[tuple[int, float]]  # (global cell index, fault rate)
    out_dir: Optional[str]
    train_on_demand: bool


def _checkpoint_path(out_dir: str, spec: SweepSpec, width: float, placement: str, dc_rate: float, dataset: str) -> Path:
    # everything training depends on goes into the name, so a changed config never reuses a stale model
    inputs = {"net": spec.net, "dataset": dataset, "train": asdict(spec.train), "mask_seed": spec.mask_seed}
    tag = hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()[:12]
    return Path(out_dir) / "checkpoints" / f"{spec.net}_w{width!r}_{placement}_dc{dc_rate!r}_{tag}.rrdc"


def _obtain_model(g: _Group, net: NetworkSpec, data: Dataset) -> Model:
    path = _checkpoint_path(g.out_dir, g.spec, g.width, g.placement, g.dc_rate, data.name) if g.out_dir else None
    if path is not None and path.exists():
        return checkpoint.load(path)
    if not g.train_on_demand:
        raise MissingCheckpointError(f"no checkpoint at {path} and training on demand is disabled")
    dc = DropConnectConfig(p=g.dc_rate, applies_to=train_policy(g.placement), mask_seed=g.spec.mask_seed)
    model = train_with_drop_connect(net, data, dc, g.spec.train).model
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(model, path)
    return model


def _run_group(g: _Group, data: Dataset) -> list[tuple[int, SweepRecord]]:
    spec = g.spec
    base = get_network(spec.net)
    net = widen(base, WidenConfig(g.width))
    model = _obtain_model(g, net, data)
    plan = plan_placement(net, g.placement)
    # every placement of a sweep shares one tile layout so fault maps line up
    layout = plan_placement(net, "all-rram").rram_layers() if "all-rram" in spec.placements else None
    latency, energy = estimate(net, plan, _cost_params(spec, base))

    needed = sorted({select_snapshot(dict.fromkeys(spec.p_primes), f)[0] for _, f in g.cells})
    snapshots = update_var(model, data, RecalibrationConfig(p_primes=tuple(needed), seed=spec.recalibration_seed))
    clean = model.accuracy(data.x_test, data.y_test)
    out = []
    for index, f in g.cells:
        p_prime, snap = select_snapshot(snapshots, f)
        arrays = map_network(snap, plan, layout=layout)
        first = spec.fault_seed + index * spec.crossbars
        seeds = range(first, first + spec.crossbars)
        res = monte_carlo_eval(
            snap, data.x_test, data.y_test, f,
            arrays=arrays, p_prime=p_prime, scale_correction=spec.scale_correction, mode=spec.fault_mode, seeds=seeds,
        )
        rec = SweepRecord(
            spec.net, g.width, g.placement, g.dc_rate, f, p_prime, spec.crossbars,
            res.mean, res.std, res.min, res.max, clean, latency, energy, net.num_params(),
            spec.train.seed, spec.mask_seed, first, model.weights_hash(),
            faultmap_digest(arrays, f, seeds, spec.fault_mode),
        )
        out.append((index, rec))
        if g.out_dir:
            _write_cell(g.out_dir, spec, index, rec)
    return out


def _write_cell(out_dir: str, spec: SweepSpec, index: int, rec: SweepRecord) -> None:
    path = Path(out_dir) / "cells" / f"{rec.key()}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"index": index, "sweep": spec.to_dict(), "sweep_digest": spec.digest(), "record": asdict(rec)}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_cell(out_dir: str, spec: SweepSpec, key: str) -> Optional[SweepRecord]:
    path = Path(out_dir) / "cells" / f"{key}.json"
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    if doc.get("sweep_digest") != spec.digest():
        logger.warning("ignoring %s: produced by a different sweep spec", path)
        return None
    return SweepRecord(**doc["record"])


def run_sweep(
    spec: SweepSpec,
    data: Optional[Dataset] = None,
    out_dir=None,
    workers: int = 1,
    resume: bool = True,
    train_on_demand: bool = True,
) -> list[SweepRecord]:
    """Evaluate every cell of ``spec``; records come back in canonical cell order.

    Cell ``i`` uses fault seeds ``fault_seed + i * crossbars`` onwards, so no
    two cells share a fault map. With ``out_dir`` set, finished cells are
    persisted and (with ``resume``) skipped on the next run.
    """
    data = data if data is not None else get_dataset(spec.dataset)
    out = str(out_dir) if out_dir is not None else None
    done: dict[int, SweepRecord] = {}
    pending: dict[tuple[float, str, float], list[tuple[int, float]]] = {}
    for index, (w, pl, dc, f) in enumerate(spec.cells()):
        rec = _read_cell(out, spec, cell_key(w, pl, dc, f)) if (out and resume) else None
        if rec is not None:
            done[index] = rec
        else:
            pending.setdefault((w, pl, dc), []).append((index, f))
    if done:
        logger.info("resuming: %d of %d cells already complete", len(done), len(spec.cells()))
    groups = [_Group(spec, w, pl, dc, cells, out, train_on_demand) for (w, pl, dc), cells in pending.items()]
    if workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, groups, [data] * len(groups)))
    else:
        results = [_run_group(g, data) for g in groups]
    for chunk in results:
        done.update(dict(chunk))
    return [done[i] for i in sorted(done)]


# -- criticality of 1x1 layers ---------------------------------------------


@dataclass
class CriticalityResult:
    default: list[SweepRecord]
    all_rram: list[SweepRecord]

    def gaps(self) -> dict[float, float]:
        """Mean-accuracy advantage of host-placed 1x1 layers, per fault rate."""
        return {d.fault_rate: d.mean - a.mean for d, a in zip(self.default, self.all_rram)}


def criticality_experiment(
    net: str,
    data: Dataset,
    fault_rates: Sequence[float] = (0.0, 0.2),
    dc_rate: float = 0.3,
    crossbars: int = 100,
    train: TrainConfig = TrainConfig(),
    fault_seed: int = 0,
    out_dir=None,
) -> CriticalityResult:
    """Host-placed 1x1 layers versus drop-connect-trained 1x1 layers on RRAM.

    Both arms share the tile layout and the fault seeds of every fault rate,
    so each crossbar instance is evaluated under an identical fault map.
    """
    spec = SweepSpec(
        net=net,
        fault_rates=tuple(fault_rates),
        dc_rates=(dc_rate,),
        placements=("default", "all-rram"),
        crossbars=crossbars,
        train=train,
        fault_seed=fault_seed,
    )
    arms = {}
    for placement in spec.placements:
        cells = [(i, f) for i, f in enumerate(spec.fault_rates)]  # same indices, hence same seeds, per arm
        g = _Group(spec, 0.0, placement, dc_rate, cells, None, True)
        arms[placement] = [rec for _, rec in _run_group(g, data)]
    result = CriticalityResult(arms["default"], arms["all-rram"])
    if out_dir is not None:
        write_csv(result.default + result.all_rram, Path(out_dir) / "criticality.csv")
    return result


# -- reporting -------------------------------------------------------------


def write_csv(records: Sequence[SweepRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in RECORD_COLUMNS)])


def read_csv(path) -> list[SweepRecord]:
    conv = {"float": float, "int": int, "str": str}
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [SweepRecord(**{k: conv[_FIELD_TYPES[k]](v) for k, v in row.items()}) for row in rows]


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "rramdc"
    return plt


def plot_accuracy(records: Sequence[SweepRecord], net: str, path) -> None:
    """Mean accuracy against drop-connect rate, one line per fault rate."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    base_w = min(r.width for r in records if r.net == net)
    rows = [r for r in records if r.net == net and r.width == base_w]
    for placement in sorted({r.placement for r in rows}):
        for f in sorted({r.fault_rate for r in rows}):
            pts = sorted((r.dc_rate, r.mean, r.std) for r in rows if r.fault_rate == f and r.placement == placement)
            xs, ys, es = zip(*pts)
            label = f"f={f:g}" + ("" if placement == "default" else f" ({placement})")
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=2, label=label)
    ax.set_xlabel("drop-connect rate")
    ax.set_ylabel("mean accuracy")
    ax.set_title(net)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def best_rates(records: Sequence[SweepRecord], net: str) -> dict[tuple[float, float], SweepRecord]:
    """Best record over drop-connect rates for each (width, fault rate), default placement."""
    best: dict[tuple[float, float], SweepRecord] = {}
    for r in records:
        if r.net != net or r.placement != "default":
            continue
        k = (r.width, r.fault_rate)
        if k not in best or r.mean > best[k].mean:
            best[k] = r
    return best


def plot_bestrate(records: Sequence[SweepRecord], net: str, path) -> None:
    """Bar chart of the best accuracy per fault rate and width, labelled with the winning rate."""
    plt = _figure()
    best = best_rates(records, net)
    widths = sorted({w for w, _ in best})
    rates = sorted({f for _, f in best})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bar = 0.8 / max(len(widths), 1)
    for i, w in enumerate(widths):
        xs = [j + i * bar for j, f in enumerate(rates) if (w, f) in best]
        recs = [best[(w, f)] for f in rates if (w, f) in best]
        bars = ax.bar(xs, [r.mean for r in recs], width=bar, label=f"{1 + w:g}x width")
        for b, r in zip(bars, recs):
            ax.annotate(f"p={r.dc_rate:g}", (b.get_x() + b.get_width() / 2, b.get_height()), ha="center", va="bottom", fontsize=6)
    ax.set_xticks([j + bar * (len(widths) - 1) / 2 for j in range(len(rates))])
    ax.set_xticklabels([f"f={f:g}" for f in rates])
    ax.set_ylabel("best mean accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title(net)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def report(records: Sequence[SweepRecord], out_dir) -> list[Path]:
    """Write ``results.csv`` plus the two figures per network; returns the paths."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "results.csv"]
    write_csv(records, paths[0])
    for net in sorted({r.net for r in records}):
        acc, best = out / f"fig_accuracy_{net}.svg", out / f"fig_bestrate_{net}.svg"
        plot_accuracy(records, net, acc)
        plot_bestrate(records, net, best)
        paths += [acc, best]
    return paths
