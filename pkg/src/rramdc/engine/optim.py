from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .tensor import Tensor


def sgd_step(
    weights: np.ndarray,
    grads: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[np.ndarray] = None,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step with heavy-ball momentum.

    ``v <- momentum * v + (g + weight_decay * w)``, ``w <- w - lr * v``.
    Returns the new weights and velocity; inputs are not modified.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if weights.shape != grads.shape:
        raise ValueError(f"weights {weights.shape} and grads {grads.shape} differ in shape")
    g = grads + weight_decay * weights if weight_decay else grads
    if velocity is None or momentum == 0.0:
        v = g.copy()
    else:
        v = momentum * velocity + g
    return weights - lr * v, v


class SGD:
    """Stateful wrapper over :func:`sgd_step` for a dict of parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name in sorted(self.params):
            t = self.params[name]
            if t.grad is None:
                continue
            # no decay on batch-norm affine parameters
            wd = self.weight_decay if name.endswith(".weight") else 0.0
            t.data, self.velocity[name] = sgd_step(
                t.data, t.grad, self.lr, self.momentum, self.velocity.get(name), wd
            )
