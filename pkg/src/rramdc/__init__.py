"""Drop-connect training and stuck-at-one fault simulation for RRAM crossbar accelerators."""

from .crossbar import FaultMap, QuantSpec, inject_sa1, map_network, monte_carlo_eval
from .dropconnect import DropConnectConfig, RecalibrationConfig, update_var
from .engine import Model, NetworkSpec
from .train import TrainConfig, train_with_drop_connect
from .transforms import WidenConfig, expand_shortcut, plan_placement, widen

__version__ = "0.1.0"

__all__ = [
    "DropConnectConfig",
    "FaultMap",
    "Model",
    "NetworkSpec",
    "QuantSpec",
    "RecalibrationConfig",
    "TrainConfig",
    "WidenConfig",
    "expand_shortcut",
    "inject_sa1",
    "map_network",
    "monte_carlo_eval",
    "plan_placement",
    "train_with_drop_connect",
    "update_var",
    "widen",
]
