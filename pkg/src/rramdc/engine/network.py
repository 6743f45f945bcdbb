"""Network topology descriptions and shape inference.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries. Every
layer names its predecessors in ``inputs``; the pseudo-layer ``"input"`` is the
network input. Layers must appear after all their predecessors and exactly one
layer (the last) may be left unconsumed.

Spec files are JSON documents validated against :data:`NETWORK_SCHEMA`::

    {
      "name": "desk-resnet",
      "input_shape": [1, 8, 8],
      "layers": [
        {"id": "conv1", "kind": "conv2d", "in_channels": 1, "out_channels": 8,
         "kernel": 3, "padding": 1},
        {"id": "bn1", "kind": "batchnorm", "in_channels": 8, "out_channels": 8},
        ...
      ]
    }

``inputs`` defaults to the previous layer. For ``fc`` layers the channel fields
hold feature counts. ``avgpool`` with ``kernel: 0`` pools globally.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import jsonschema

from .functional import conv_output_size

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "avgpool", "fc", "residual-add")
INPUT = "input"

NETWORK_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["name", "input_shape", "layers"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "input_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "kind"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "kind": {"enum": list(LAYER_KINDS)},
                    "inputs": {"type": "array", "items": {"type": "string"}},
                    "in_channels": {"type": "integer", "minimum": 0},
                    "out_channels": {"type": "integer", "minimum": 0},
                    "kernel": {"type": "integer", "minimum": 0},
                    "stride": {"type": "integer", "minimum": 1},
                    "padding": {"type": "integer", "minimum": 0},
                    "groups": {"type": "integer", "minimum": 1},
                    "bias": {"type": "boolean"},
                    "role": {"type": "string"},
                },
            },
        },
    },
}


class NetworkSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    # free-form tag; "shortcut" marks residual projection convs, "pointwise" 1x1 expansions
    role: str = ""

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv2d"

    @property
    def is_pointwise(self) -> bool:
        return self.kind == "conv2d" and self.kernel == 1

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv2d", "fc")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)
        if self.kind == "fc":
            return (self.out_channels, self.in_channels)
        raise NetworkSpecError(f"layer {self.id!r} ({self.kind}) has no weights")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = list(self.inputs)
        defaults = LayerSpec(id="", kind="")
        return {k: v for k, v in d.items() if k in ("id", "kind") or v != getattr(defaults, k) or k == "inputs"}


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        fixed = []
        prev = INPUT
        for layer in self.layers:
            if not layer.inputs:
                layer = replace(layer, inputs=(prev,))
            fixed.append(layer)
            prev = layer.id
        object.__setattr__(self, "layers", tuple(fixed))

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __getitem__(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    @property
    def output(self) -> str:
        return self.layers[-1].id

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        for layer in self.layers:
            out.setdefault(layer.id, [])
            for src in layer.inputs:
                out.setdefault(src, []).append(layer.id)
        return out

    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.is_conv]

    def num_params(self) -> int:
        total = 0
        for layer in self.layers:
            if layer.has_weights:
                total += math.prod(layer.weight_shape())
                if layer.bias:
                    total += layer.out_channels
            elif layer.kind == "batchnorm":
                total += 2 * layer.out_channels
        return total

    def infer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer; raises on any inconsistency."""
        if not self.layers:
            raise NetworkSpecError(f"network {self.name!r} has no layers")
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        seen = set()
        for layer in self.layers:
            if layer.id in seen or layer.id == INPUT:
                raise NetworkSpecError(f"duplicate layer id {layer.id!r}")
            if layer.kind not in LAYER_KINDS:
                raise NetworkSpecError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
            for src in layer.inputs:
                if src not in shapes:
                    raise NetworkSpecError(f"layer {layer.id!r}: input {src!r} is not an earlier layer")
            shapes[layer.id] = _infer_layer(layer, [shapes[s] for s in layer.inputs])
            seen.add(layer.id)
        unconsumed = [k for k, v in self.consumers().items() if not v and k != INPUT]
        if unconsumed != [self.output]:
            raise NetworkSpecError(f"network must have a single output, found unconsumed layers {unconsumed}")
        del shapes[INPUT]
        return shapes

    def validate(self) -> "NetworkSpec":
        self.infer_shapes()
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        jsonschema.validate(d, NETWORK_SCHEMA)
        layers = []
        for item in d["layers"]:
            item = dict(item)
            item["inputs"] = tuple(item.get("inputs", ()))
            layers.append(LayerSpec(**item))
        return cls(name=d["name"], input_shape=tuple(d["input_shape"]), layers=tuple(layers)).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_json(Path(path).read_text())


def _infer_layer(layer: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    lid = layer.id
    if layer.kind == "residual-add":
        if len(in_shapes) < 2:
            raise NetworkSpecError(f"layer {lid!r}: residual-add needs at least two inputs")
        if len(set(in_shapes)) != 1:
            raise NetworkSpecError(f"layer {lid!r}: residual-add input shapes differ: {in_shapes}")
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise NetworkSpecError(f"layer {lid!r}: {layer.kind} takes exactly one input, got {len(in_shapes)}")
    shape = in_shapes[0]

    if layer.kind == "fc":
        features = math.prod(shape)
        if layer.in_channels != features:
            raise NetworkSpecError(f"layer {lid!r}: fc expects {layer.in_channels} input features, got {features} from shape {shape}")
        if layer.out_channels < 1:
            raise NetworkSpecError(f"layer {lid!r}: fc needs out_channels >= 1")
        return (layer.out_channels,)

    if len(shape) != 3:
        raise NetworkSpecError(f"layer {lid!r}: {layer.kind} needs a CxHxW input, got {shape}")
    c, h, w = shape
    if layer.kind == "relu":
        return shape
    if layer.kind == "batchnorm":
        if layer.in_channels and layer.in_channels != c:
            raise NetworkSpecError(f"layer {lid!r}: batchnorm declares {layer.in_channels} channels, input has {c}")
        return shape
    if layer.kind == "avgpool":
        if layer.kernel == 0:
            return (c, 1, 1)
        if h % layer.kernel or w % layer.kernel:
            raise NetworkSpecError(f"layer {lid!r}: avgpool kernel {layer.kernel} does not tile {h}x{w}")
        return (c, h // layer.kernel, w // layer.kernel)

    # conv2d
    if layer.kernel < 1 or layer.in_channels < 1 or layer.out_channels < 1:
        raise NetworkSpecError(f"layer {lid!r}: kernel and channel counts must be >= 1")
    if layer.in_channels != c:
        raise NetworkSpecError(f"layer {lid!r}: conv declares in_channels={layer.in_channels}, input has {c}")
    if c % layer.groups or layer.out_channels % layer.groups:
        raise NetworkSpecError(f"layer {lid!r}: groups={layer.groups} does not divide channels {c}->{layer.out_channels}")
    ho = conv_output_size(h, layer.kernel, layer.stride, layer.padding)
    wo = conv_output_size(w, layer.kernel, layer.stride, layer.padding)
    if ho < 1 or wo < 1:
        raise NetworkSpecError(f"layer {lid!r}: kernel {layer.kernel} too large for {h}x{w} input")
    return (layer.out_channels, ho, wo)
