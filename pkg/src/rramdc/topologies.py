"""ResNet20-, VGG13- and MobileNetV2-style topologies, full and desk scale.

Full-scale builders follow the usual CIFAR-10 configurations (3x32x32 input,
10 classes). Max pooling is replaced by 2x2 average pooling and ReLU6 by ReLU
since the engine only carries those layer kinds. Desk-scale variants take the
8x8 single-channel digits images used for the acceptance runs.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .engine.network import LayerSpec, NetworkSpec


class _Builder:
    def __init__(self, in_channels: int):
        self.layers: list[LayerSpec] = []
        self.channels = in_channels
        self.last = "input"

    def add(self, layer: LayerSpec) -> str:
        if not layer.inputs:
            layer = replace(layer, inputs=(self.last,))
        self.layers.append(layer)
        self.last = layer.id
        return layer.id

    def conv_bn(self, name, out, kernel=3, stride=1, groups=1, relu=True, role="", src=None):
        src = src or self.last
        pad = kernel // 2
        self.add(LayerSpec(f"{name}.conv", "conv2d", (src,), self.channels, out, kernel, stride, pad, groups, role=role))
        self.add(LayerSpec(f"{name}.bn", "batchnorm", in_channels=out, out_channels=out))
        if relu:
            self.add(LayerSpec(f"{name}.relu", "relu"))
        self.channels = out
        return self.last

    def head(self, num_classes: int):
        self.add(LayerSpec("pool", "avgpool", kernel=0))
        self.add(LayerSpec("fc", "fc", in_channels=self.channels, out_channels=num_classes, bias=True))


def resnet(
    name: str,
    input_shape: Sequence[int] = (3, 32, 32),
    widths: Sequence[int] = (16, 32, 64),
    blocks: int = 3,
    num_classes: int = 10,
) -> NetworkSpec:
    """Basic-block ResNet with 1x1 projection shortcuts where the shape changes."""
    b = _Builder(input_shape[0])
    b.conv_bn("stem", widths[0])
    for si, width in enumerate(widths):
        for bi in range(blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            block_in, in_ch = b.last, b.channels
            pre = f"s{si + 1}b{bi + 1}"
            b.conv_bn(f"{pre}.a", width, stride=stride)
            b.conv_bn(f"{pre}.b", width, relu=False)
            main = b.last
            if stride != 1 or in_ch != width:
                b.channels = in_ch
                b.conv_bn(f"{pre}.short", width, kernel=1, stride=stride, relu=False, role="shortcut", src=block_in)
                short = b.last
            else:
                short = block_in
            b.add(LayerSpec(f"{pre}.add", "residual-add", (main, short)))
            b.add(LayerSpec(f"{pre}.relu", "relu"))
            b.channels = width
    b.head(num_classes)
    return NetworkSpec(name, tuple(input_shape), tuple(b.layers)).validate()


VGG13_CFG = (64, 64, "P", 128, 128, "P", 256, 256, "P", 512, 512, "P", 512, 512, "P")


def vgg(name: str, input_shape=(3, 32, 32), cfg=VGG13_CFG, num_classes: int = 10) -> NetworkSpec:
    b = _Builder(input_shape[0])
    for i, item in enumerate(cfg):
        if item == "P":
            b.add(LayerSpec(f"pool{i}", "avgpool", kernel=2))
        else:
            b.conv_bn(f"c{i}", int(item))
    b.add(LayerSpec("fc", "fc", in_channels=b.channels * _spatial(b, input_shape), out_channels=num_classes, bias=True))
    return NetworkSpec(name, tuple(input_shape), tuple(b.layers)).validate()


def _spatial(b: _Builder, input_shape) -> int:
    spec = NetworkSpec("tmp", tuple(input_shape), tuple(b.layers))
    shape = spec.infer_shapes()[b.last]
    return shape[1] * shape[2]


# (expansion t, output channels c, repeats n, first stride s)
MOBILENETV2_CFG = ((1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def mobilenetv2(
    name: str,
    input_shape=(3, 32, 32),
    cfg=MOBILENETV2_CFG,
    stem: int = 32,
    last: int = 1280,
    num_classes: int = 10,
) -> NetworkSpec:
    """Inverted-residual network; point-wise convs carry ``role="pointwise"``."""
    b = _Builder(input_shape[0])
    b.conv_bn("stem", stem)
    idx = 0
    for t, c, n, s in cfg:
        for r in range(n):
            idx += 1
            stride = s if r == 0 else 1
            block_in, in_ch = b.last, b.channels
            pre = f"ir{idx}"
            if t != 1:
                b.conv_bn(f"{pre}.expand", in_ch * t, kernel=1, role="pointwise")
            hidden = b.channels
            b.conv_bn(f"{pre}.dw", hidden, kernel=3, stride=stride, groups=hidden)
            b.conv_bn(f"{pre}.project", c, kernel=1, relu=False, role="pointwise")
            if stride == 1 and in_ch == c:
                b.add(LayerSpec(f"{pre}.add", "residual-add", (b.last, block_in)))
    b.conv_bn("last", last, kernel=1, role="pointwise")
    b.head(num_classes)
    return NetworkSpec(name, tuple(input_shape), tuple(b.layers)).validate()


def resnet20() -> NetworkSpec:
    return resnet("resnet20")


def vgg13() -> NetworkSpec:
    return vgg("vgg13")


def mobilenet_v2() -> NetworkSpec:
    return mobilenetv2("mobilenetv2")


DESK_INPUT = (1, 8, 8)


def desk_resnet(widths=(8, 16, 32), blocks: int = 1) -> NetworkSpec:
    return resnet("desk-resnet", DESK_INPUT, widths, blocks)


def desk_vgg() -> NetworkSpec:
    return vgg("desk-vgg", DESK_INPUT, (16, 16, "P", 32, 32, "P", 64, 64, "P"))


def desk_mobilenet() -> NetworkSpec:
    cfg = ((1, 8, 1, 1), (4, 16, 2, 2), (4, 32, 2, 2))
    return mobilenetv2("desk-mobilenet", DESK_INPUT, cfg, stem=8, last=64)


BUILTIN = {
    "resnet20": resnet20,
    "vgg13": vgg13,
    "mobilenetv2": mobilenet_v2,
    "desk-resnet": desk_resnet,
    "desk-vgg": desk_vgg,
    "desk-mobilenet": desk_mobilenet,
}


def get_network(name_or_path: str) -> NetworkSpec:
    """Resolve a builtin topology name or load a JSON spec file."""
    if name_or_path in BUILTIN:
        return BUILTIN[name_or_path]()
    return NetworkSpec.load(name_or_path)
