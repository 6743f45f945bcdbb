"""SGD training with drop-connect on the applicable layers."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, batches
from .dropconnect import DropConnectConfig, draw_masks
from .engine.functional import softmax_xent
from .engine.model import BNConfig, Model
from .engine.network import NetworkSpec
from .engine.optim import SGD

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # cosine | constant
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def lr_at(self, iteration: int, total: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * iteration / max(total, 1)))
        raise ValueError(f"unknown lr schedule {self.schedule!r}")


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    mask_applications: Counter = field(default_factory=Counter)


def train_with_drop_connect(
    net: NetworkSpec,
    data: Dataset,
    dc: Optional[DropConnectConfig] = None,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train ``net`` from scratch; ``dc=None`` or ``dc.p == 0`` is plain training.

    Fresh masks are drawn for every iteration from ``(dc.mask_seed, iteration,
    layer id)``; batch norm sees the already rescaled convolution outputs.
    """
    if len(data.x_train) == 0:
        raise ValueError("training set is empty")
    dc = dc or DropConnectConfig(p=0.0)
    model = Model(net, seed=cfg.seed, bn=BNConfig(cfg.bn_eps, cfg.bn_momentum))
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    per_epoch = sum(1 for _ in batches(data.x_train, data.y_train, cfg.batch_size))
    total = per_epoch * cfg.epochs
    scales = {lid: dc.scale for lid in dc.masked_layers(net)} if dc.drop_rate else {}
    result = TrainResult(model)
    it = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        for xb, yb in batches(data.x_train, data.y_train, cfg.batch_size, rng):
            masks = draw_masks(net, dc, it)
            result.mask_applications.update(masks.keys())
            try:
                logits = model.forward(xb, training=True, masks=masks, scales=scales, scale_on_weights=dc.scale_on_weights)
            except FloatingPointError:
                raise TrainingDivergedError(it, float("nan")) from None
            loss, dlogits = softmax_xent(logits, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(it, loss)
            try:
                model.backward(dlogits)
            except FloatingPointError:
                raise TrainingDivergedError(it, loss) from None
            opt.lr = cfg.lr_at(it, total)
            opt.step()
            result.losses.append(loss)
            it += 1
        logger.debug("epoch %d loss %.4f", epoch, result.losses[-1])
    model.zero_grad()
    model.metadata = {
        "dropconnect": dc.to_dict() if isinstance(dc.applies_to, str) else {"p": dc.p, "applies_to": "custom"},
        "train": asdict(cfg),
        "dataset": data.name,
    }
    return result
