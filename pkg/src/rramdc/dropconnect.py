"""Drop-connect masks, masked convolution and batch-norm recalibration.

``p`` is the probability that a weight is *dropped* (mask entry 0); the
surviving contribution is scaled by ``1 / (1 - p)`` so the expected layer
output is unchanged. ``DropConnectConfig(convention="keep")`` reads ``p`` as
the probability of a mask entry being 1 instead.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Union

import numpy as np

from .data import Dataset, batches
from .engine import functional as F
from .engine.model import Model
from .engine.network import LayerSpec, NetworkSpec

DEFAULT_P_PRIMES = (0.0, 0.1, 0.2, 0.3)


class DropConnectConfigError(ValueError):
    pass


def _spatial_conv(layer: LayerSpec) -> bool:
    return layer.kind == "conv2d" and layer.kernel > 1


POLICIES: dict[str, Callable[[LayerSpec], bool]] = {
    "spatial": _spatial_conv,
    "all-conv": lambda layer: layer.kind == "conv2d",
    "none": lambda layer: False,
}


@dataclass(frozen=True)
class DropConnectConfig:
    p: float = 0.0
    # named policy from POLICIES, or any predicate over LayerSpec
    applies_to: Union[str, Callable[[LayerSpec], bool]] = "spatial"
    mask_seed: int = 0
    convention: str = "drop"
    # apply 1/(1-p) to the masked weights instead of the layer output
    scale_on_weights: bool = False

    def __post_init__(self):
        if self.convention not in ("drop", "keep"):
            raise DropConnectConfigError(f"convention must be 'drop' or 'keep', got {self.convention!r}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise DropConnectConfigError(f"drop rate must be in [0, 1), got {self.drop_rate} (p={self.p}, {self.convention})")
        if isinstance(self.applies_to, str) and self.applies_to not in POLICIES:
            raise DropConnectConfigError(f"unknown layer policy {self.applies_to!r}")

    @property
    def drop_rate(self) -> float:
        return self.p if self.convention == "drop" else 1.0 - self.p

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.drop_rate)

    def applies(self, layer: LayerSpec) -> bool:
        pred = POLICIES[self.applies_to] if isinstance(self.applies_to, str) else self.applies_to
        return bool(pred(layer))

    def masked_layers(self, spec: NetworkSpec) -> list[str]:
        return [layer.id for layer in spec if layer.has_weights and self.applies(layer)]

    def to_dict(self) -> dict:
        if not isinstance(self.applies_to, str):
            raise DropConnectConfigError("only named layer policies can be serialized")
        return asdict(self)


@dataclass
class Mask:
    values: np.ndarray
    layer_id: str = ""
    draw_id: int = 0


def mask_rng(seed: int, draw_id: int, layer_id: str) -> np.random.Generator:
    """Generator for one layer's mask at one draw; no mask state needs storing."""
    return np.random.default_rng([seed, draw_id, zlib.crc32(layer_id.encode())])


def sample_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 float mask with each entry independently 0 with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise DropConnectConfigError(f"drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p).astype(np.float64)


def draw_masks(spec: NetworkSpec, dc: DropConnectConfig, draw_id: int) -> dict[str, np.ndarray]:
    if dc.drop_rate == 0.0:
        return {}
    out = {}
    for layer in spec:
        if layer.has_weights and dc.applies(layer):
            out[layer.id] = sample_mask(layer.weight_shape(), dc.drop_rate, mask_rng(dc.mask_seed, draw_id, layer.id))
    return out


def apply_drop_connect(
    x: np.ndarray,
    weights: np.ndarray,
    mask: Union[Mask, np.ndarray],
    p: float,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """``(1 / (1 - p)) * conv2d(x, weights * mask)``."""
    if not 0.0 <= p < 1.0:
        raise DropConnectConfigError(f"drop probability must be in [0, 1), got {p}")
    m = mask.values if isinstance(mask, Mask) else np.asarray(mask)
    if m.shape != weights.shape:
        raise ValueError(f"mask shape {m.shape} does not match weights {weights.shape}")
    out = F.conv2d_forward(x, weights * m, stride, padding, groups)
    return out * (1.0 / (1.0 - p)) if p else out


@dataclass(frozen=True)
class RecalibrationConfig:
    p_primes: tuple[float, ...] = DEFAULT_P_PRIMES
    epochs: int = 1
    seed: int = 0
    batch_size: int = 64
    # layer policy used for the fault emulation; None -> the policy the model was trained with
    applies_to: Union[str, Callable, None] = None

    def __post_init__(self):
        for pp in self.p_primes:
            if not 0.0 <= pp < 1.0:
                raise DropConnectConfigError(f"p_prime must be in [0, 1), got {pp}")
        if self.epochs < 1:
            raise DropConnectConfigError("recalibration needs at least one epoch")


def update_var(model: Model, data: Dataset, cfg: RecalibrationConfig = RecalibrationConfig()) -> dict[float, Model]:
    """Recalibrate batch-norm running statistics for each inference fault rate.

    For every ``p_prime`` a copy of ``model`` runs training-mode forward passes
    over the training set with weights frozen, masks drawn at rate
    ``p_prime`` and the ``1 / (1 - p_prime)`` scale applied, so only the
    batch-norm running mean/variance move. Returns one snapshot per
    ``p_prime``; ``model`` itself is not modified.
    """
    trained = model.metadata.get("dropconnect", {})
    policy = cfg.applies_to or trained.get("applies_to", "spatial")
    scale_on_weights = bool(trained.get("scale_on_weights", False))
    snapshots: dict[float, Model] = {}
    for pp in cfg.p_primes:
        snap = model.clone()
        dc = DropConnectConfig(p=pp, applies_to=policy, mask_seed=cfg.seed, scale_on_weights=scale_on_weights)
        scales = {lid: dc.scale for lid in dc.masked_layers(snap.spec)} if pp else {}
        draw = 0
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch, 7])
            for xb, _ in batches(data.x_train, data.y_train, cfg.batch_size, rng):
                masks = draw_masks(snap.spec, dc, draw)
                snap.forward(xb, training=True, masks=masks, scales=scales, scale_on_weights=scale_on_weights)
                draw += 1
        snap._tape = None
        snap.metadata["updatevar"] = {"p_prime": pp, "epochs": cfg.epochs, "seed": cfg.seed, "applies_to": policy if isinstance(policy, str) else "custom"}
        snapshots[pp] = snap
    return snapshots


def select_snapshot(snapshots: dict[float, Model], fault_rate: float) -> tuple[float, Model]:
    """The snapshot calibrated at ``fault_rate``, or the nearest one."""
    key = min(snapshots, key=lambda pp: (abs(pp - fault_rate), pp))
    return key, snapshots[key]
