"""Parameter container used by the engine."""

from __future__ import annotations

import hashlib
from typing import Iterable, Optional

import numpy as np


class Tensor:
    """A float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: Optional[np.ndarray] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        if grad is not None:
            self.set_grad(grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def set_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        self.grad = grad

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced in {where}")
    return arr


def hash_arrays(named: Iterable[tuple[str, np.ndarray]]) -> str:
    """SHA-256 over (name, shape, little-endian float64 bytes), in the given order."""
    h = hashlib.sha256()
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
