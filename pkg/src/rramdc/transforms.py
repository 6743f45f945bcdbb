"""Structural countermeasures and layer placement.

* :func:`widen` multiplies every interior channel count by ``1 + p``.
* :func:`expand_shortcut` turns 1x1 shortcut projections into padded 3x3 convs.
* :func:`plan_placement` decides which layers run on RRAM and which on the
  fault-free host.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .engine.model import Model
from .engine.network import INPUT, NetworkSpec, NetworkSpecError

logger = logging.getLogger(__name__)

RRAM = "rram"
HOST = "host"
DEFAULT_WIDEN_GRID = (0.0, 0.2, 0.4, 0.6)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class WidenConfig:
    p: float = 0.0
    # per-layer multiplier overrides, keyed by conv layer id
    overrides: Mapping[str, float] = field(default_factory=dict)

    @property
    def multiplier(self) -> float:
        return 1.0 + self.p

    def channels(self, c: int, layer_id: str = "") -> int:
        m = self.overrides.get(layer_id, self.multiplier)
        return max(1, round_half_away(c * m))


def widen(net: NetworkSpec, cfg: WidenConfig) -> NetworkSpec:
    """Widen every conv layer's output channels, then re-derive input channels.

    The network input and the classifier's output count are untouched. If two
    branches of a residual join disagree after rounding, the narrower producers
    are bumped to the join's maximum and a warning is logged.
    """
    if cfg.p == 0.0 and not cfg.overrides:
        return net
    out_ch = {layer.id: cfg.channels(layer.out_channels, layer.id) for layer in net if layer.is_conv}
    for _ in range(len(net.layers)):
        layers, adjusted = _propagate(net, out_ch)
        if not adjusted:
            break
        for lid, c in adjusted.items():
            logger.warning("widen: conv %s adjusted to %d channels to match a residual join", lid, c)
            out_ch[lid] = c
    spec = NetworkSpec(net.name, net.input_shape, tuple(layers))
    return spec.validate()


def _producer_conv(net: NetworkSpec, lid: str) -> Optional[str]:
    while lid != INPUT:
        layer = net[lid]
        if layer.is_conv:
            return lid
        if layer.kind == "residual-add" or len(layer.inputs) != 1:
            return None
        lid = layer.inputs[0]
    return None


def _propagate(net: NetworkSpec, out_ch: dict[str, int]):
    channels = {INPUT: net.input_shape[0]}
    shapes = net.infer_shapes()
    layers = []
    adjusted: dict[str, int] = {}
    for layer in net:
        in_c = channels[layer.inputs[0]]
        if layer.is_conv:
            depthwise = layer.groups > 1 and layer.groups == layer.in_channels == layer.out_channels
            groups = in_c if depthwise else layer.groups
            new_out = in_c if depthwise else out_ch[layer.id]
            layer = replace(layer, in_channels=in_c, out_channels=new_out, groups=groups)
            channels[layer.id] = new_out
        elif layer.kind == "batchnorm":
            layer = replace(layer, in_channels=in_c, out_channels=in_c)
            channels[layer.id] = in_c
        elif layer.kind == "fc":
            src_shape = shapes[layer.inputs[0]] if layer.inputs[0] != INPUT else net.input_shape
            spatial = math.prod(src_shape) // src_shape[0]
            layer = replace(layer, in_channels=in_c * spatial)
            channels[layer.id] = layer.out_channels
        elif layer.kind == "residual-add":
            cs = [channels[s] for s in layer.inputs]
            top = max(cs)
            for src, c in zip(layer.inputs, cs):
                if c != top:
                    producer = _producer_conv(net, src)
                    if producer is None:
                        raise NetworkSpecError(f"cannot reconcile residual join {layer.id!r}: branch {src!r} has no conv producer")
                    adjusted[producer] = top
            channels[layer.id] = top
        else:
            channels[layer.id] = in_c
        layers.append(layer)
    return layers, adjusted


def transplant(src: Model, spec: NetworkSpec) -> Model:
    """Copy ``src`` state into a model of identically shaped ``spec``."""
    dst = Model(spec, seed=0, bn=src.bn)
    for k, t in src.params.items():
        if dst.params[k].shape != t.shape:
            raise ValueError(f"cannot transplant {k}: {t.shape} vs {dst.params[k].shape}")
        dst.params[k] = t.copy()
    dst.buffers = {k: v.copy() for k, v in src.buffers.items()}
    dst.metadata = dict(src.metadata)
    return dst


def shortcut_layers(net: NetworkSpec) -> list[str]:
    return [layer.id for layer in net if layer.is_pointwise and layer.role == "shortcut"]


def expand_shortcut(net: NetworkSpec, kernel: int = 3) -> NetworkSpec:
    """Replace each 1x1 shortcut conv by a ``kernel x kernel`` conv padded to keep its shape."""
    targets = set(shortcut_layers(net))
    if not targets:
        logger.warning("expand_shortcut: network %r has no 1x1 shortcut convolutions", net.name)
        return net
    layers = tuple(replace(layer, kernel=kernel, padding=kernel // 2) if layer.id in targets else layer for layer in net)
    return NetworkSpec(net.name, net.input_shape, layers).validate()


def expand_shortcut_model(model: Model, init: str = "center", seed: int = 0, kernel: int = 3) -> Model:
    """Expanded copy of ``model``.

    ``init="center"`` puts the old 1x1 weights at the kernel centre with zeros
    around them, which leaves the network function unchanged; ``"fresh"``
    draws a new Kaiming init for the expanded layers.
    """
    spec = expand_shortcut(model.spec, kernel)
    fresh = Model(spec, seed=seed, bn=model.bn)
    out = fresh.clone()
    targets = set(shortcut_layers(model.spec))
    for k, t in model.params.items():
        lid = k.rsplit(".", 1)[0]
        if lid in targets and k.endswith(".weight"):
            if init == "center":
                w = np.zeros(out.params[k].shape)
                w[:, :, kernel // 2, kernel // 2] = t.data[:, :, 0, 0]
                out.params[k].data = w
            elif init != "fresh":
                raise ValueError(f"unknown init {init!r}")
        else:
            out.params[k] = t.copy()
    out.buffers = {k: v.copy() for k, v in model.buffers.items()}
    out.metadata = dict(model.metadata)
    return out


class PlacementPlan(dict):
    """Mapping of layer id to ``"rram"`` or ``"host"``."""

    def rram_layers(self) -> list[str]:
        return [lid for lid, where in self.items() if where == RRAM]

    def host_layers(self) -> list[str]:
        return [lid for lid, where in self.items() if where == HOST]


def plan_placement(net: NetworkSpec, policy: str = "default", custom: Optional[Mapping[str, str]] = None) -> PlacementPlan:
    """Place layers on RRAM or host.

    ``default``: convs with kernel > 1 on RRAM, everything else (1x1 convs,
    batch norm, activations, pooling, fc) on host. ``all-rram``: every conv on
    RRAM. ``custom``: the default plan overridden by ``custom``.
    """
    plan = PlacementPlan()
    for layer in net:
        if policy == "all-rram":
            plan[layer.id] = RRAM if layer.is_conv else HOST
        elif policy in ("default", "custom"):
            plan[layer.id] = RRAM if (layer.is_conv and layer.kernel > 1) else HOST
        else:
            raise ValueError(f"unknown placement policy {policy!r}")
    if policy == "custom":
        for lid, where in (custom or {}).items():
            if lid not in plan:
                raise KeyError(f"custom placement names unknown layer {lid!r}")
            if where not in (RRAM, HOST):
                raise ValueError(f"layer {lid!r}: placement must be 'rram' or 'host', got {where!r}")
            if where == RRAM and not net[lid].has_weights:
                raise ValueError(f"layer {lid!r} ({net[lid].kind}) has no weights to place on RRAM")
            plan[lid] = where
    return plan
