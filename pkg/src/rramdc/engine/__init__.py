"""Minimal deterministic NCHW training engine (numpy, float64)."""

from . import checkpoint, functional
from .model import BNConfig, Model
from .network import INPUT, LayerSpec, NetworkSpec, NetworkSpecError
from .optim import SGD, sgd_step
from .tensor import Tensor

__all__ = [
    "BNConfig",
    "INPUT",
    "LayerSpec",
    "Model",
    "NetworkSpec",
    "NetworkSpecError",
    "SGD",
    "Tensor",
    "checkpoint",
    "functional",
    "sgd_step",
]
