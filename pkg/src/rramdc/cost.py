"""Latency and energy estimates for a network placed on an RRAM accelerator.

Both figures are proportional to the multiply-accumulate count of the
RRAM-placed layers: ``latency = ops * workload / throughput`` and
``energy = ops * workload / power_eff``. The two constants have no built-in
values; set them explicitly or derive them with :func:`calibrate` from one
reference configuration whose latency and energy are known.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .engine.network import NetworkSpec
from .transforms import HOST, RRAM, PlacementPlan, WidenConfig, plan_placement, widen

# Published latency (s) and energy figures per width multiplier for the
# full-size reference networks, keyed by builtin network name.
PUBLISHED_COSTS: dict[str, dict[float, tuple[float, float]]] = {
    "resnet20": {1.0: (15.74, 113.32), 1.2: (22.13, 159.28), 1.4: (29.80, 214.53), 1.6: (39.11, 281.56)},
    "mobilenetv2": {1.0: (0.68, 4.89), 1.2: (0.96, 6.93)},
    "vgg13": {1.0: (87.83, 632.16), 1.2: (125.25, 901.56), 1.4: (170.59, 1227.84), 1.6: (222.53, 1601.71)},
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CostModelParams:
    """Accelerator constants.

    ``rram_throughput`` is in MACs per second; ``rram_power_eff`` in MACs per
    unit of the energy column. Host layers are free unless both host
    constants are given.
    """

    rram_throughput: Optional[float] = None
    rram_power_eff: Optional[float] = None
    workload: float = 1.0
    host_throughput: Optional[float] = None
    host_power_eff: Optional[float] = None

    def __post_init__(self):
        for name in ("rram_throughput", "rram_power_eff", "host_throughput", "host_power_eff"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be strictly positive, got {v}")
        if not self.workload > 0:
            raise ValueError(f"workload must be strictly positive, got {self.workload}")
        if (self.host_throughput is None) != (self.host_power_eff is None):
            raise ValueError("host_throughput and host_power_eff must be given together")

    @property
    def calibrated(self) -> bool:
        return self.rram_throughput is not None and self.rram_power_eff is not None

    @property
    def includes_host(self) -> bool:
        return self.host_throughput is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModelParams":
        return cls(**d)


@dataclass
class OpCount:
    per_layer: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())


def layer_macs(net: NetworkSpec, layer_id: str, shapes: Optional[dict] = None) -> int:
    """Multiply-accumulates of one conv or fc layer for a single input sample."""
    layer = net[layer_id]
    if layer.is_conv:
        shapes = shapes if shapes is not None else net.infer_shapes()
        _, ho, wo = shapes[layer.id]
        fan_in = (layer.in_channels // layer.groups) * layer.kernel * layer.kernel
        return layer.out_channels * fan_in * ho * wo
    if layer.kind == "fc":
        return layer.in_channels * layer.out_channels
    return 0


def count_ops(net: NetworkSpec, plan: Optional[PlacementPlan] = None, target: str = RRAM) -> OpCount:
    """MACs per sample of every weighted layer placed on ``target``."""
    plan = plan if plan is not None else plan_placement(net)
    ops = OpCount()
    shapes = net.infer_shapes()
    for layer in net:
        if layer.has_weights and plan.get(layer.id) == target:
            ops.per_layer[layer.id] = layer_macs(net, layer.id, shapes)
    return ops


def estimate(net: NetworkSpec, plan: Optional[PlacementPlan], params: CostModelParams) -> tuple[float, float]:
    """``(latency, energy)`` of running ``params.workload`` samples."""
    if not params.calibrated:
        raise CalibrationError("cost constants are not set; pass explicit constants or calibrate first")
    plan = plan if plan is not None else plan_placement(net)
    ops = count_ops(net, plan).total * params.workload
    latency = ops / params.rram_throughput
    energy = ops / params.rram_power_eff
    if params.includes_host:
        host = count_ops(net, plan, HOST).total * params.workload
        latency += host / params.host_throughput
        energy += host / params.host_power_eff
    return latency, energy


def calibrate(
    params: CostModelParams, net: NetworkSpec, plan: Optional[PlacementPlan], latency: float, energy: float
) -> CostModelParams:
    """Constants for which :func:`estimate` reproduces ``(latency, energy)`` on the anchor.

    Any host constants in ``params`` are kept and their share is removed from
    the anchor first.
    """
    if not (latency > 0 and energy > 0):
        raise CalibrationError(f"anchor latency and energy must be positive, got ({latency}, {energy})")
    plan = plan if plan is not None else plan_placement(net)
    ops = count_ops(net, plan).total * params.workload
    if ops == 0:
        raise CalibrationError(f"anchor network {net.name!r} has no RRAM-placed operations")
    if params.includes_host:
        host = count_ops(net, plan, HOST).total * params.workload
        latency -= host / params.host_throughput
        energy -= host / params.host_power_eff
        if not (latency > 0 and energy > 0):
            raise CalibrationError("host share alone exceeds the anchor figures")
    return replace(params, rram_throughput=ops / latency, rram_power_eff=ops / energy)


@dataclass(frozen=True)
class Anchor:
    """A reference configuration with known cost, as stored in an anchor file."""

    net: str
    latency: float
    energy: float
    width: float = 0.0
    placement: str = "default"
    workload: float = 1.0

    def spec(self) -> NetworkSpec:
        from .topologies import get_network

        return widen(get_network(self.net), WidenConfig(self.width))

    def calibrate(self, params: Optional[CostModelParams] = None) -> CostModelParams:
        params = params or CostModelParams(workload=self.workload)
        spec = self.spec()
        return calibrate(params, spec, plan_placement(spec, self.placement), self.latency, self.energy)

    @classmethod
    def load(cls, path) -> "Anchor":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def table_anchor(net: str, width: float = 1.0) -> Anchor:
    latency, energy = PUBLISHED_COSTS[net][width]
    return Anchor(net, latency, energy, round(width - 1.0, 10))


COST_COLUMNS = ("layer", "placement", "macs", "latency", "energy")


def cost_table(net: NetworkSpec, plan: Optional[PlacementPlan], params: CostModelParams) -> list[dict]:
    """One row per weighted layer with its share of latency and energy."""
    if not params.calibrated:
        raise CalibrationError("cost constants are not set; pass explicit constants or calibrate first")
    plan = plan if plan is not None else plan_placement(net)
    rows = []
    shapes = net.infer_shapes()
    for layer in net:
        if not layer.has_weights:
            continue
        where = plan[layer.id]
        macs = layer_macs(net, layer.id, shapes)
        work = macs * params.workload
        if where == RRAM:
            lat, en = work / params.rram_throughput, work / params.rram_power_eff
        elif params.includes_host:
            lat, en = work / params.host_throughput, work / params.host_power_eff
        else:
            lat, en = 0.0, 0.0
        rows.append({"layer": layer.id, "placement": where, "macs": macs, "latency": lat, "energy": en})
    return rows


def cost_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COST_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
