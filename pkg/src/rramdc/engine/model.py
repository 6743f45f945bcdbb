"""Executable model built from a :class:`NetworkSpec`.

The model owns parameters (``<layer>.weight``, ``<layer>.bias``,
``<layer>.gamma``, ``<layer>.beta``) and batch-norm buffers
(``<layer>.running_mean``, ``<layer>.running_var``). Training-mode forward
passes record a tape that :meth:`Model.backward` replays in reverse; eval-mode
passes touch no state at all.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import functional as F
from .network import INPUT, LayerSpec, NetworkSpec
from .tensor import Tensor, check_finite, hash_arrays


@dataclass
class BNConfig:
    eps: float = 1e-5
    momentum: float = 0.1


class Model:
    def __init__(self, spec: NetworkSpec, seed: int = 0, bn: BNConfig | None = None):
        self.spec = spec.validate()
        self.shapes = spec.infer_shapes()
        self.bn = bn or BNConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.metadata: dict = {}
        self.input_grad: Optional[np.ndarray] = None
        self._tape: Optional[list] = None
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        # Kaiming (fan-in) normal init, one generator walked in layer order
        rng = np.random.default_rng(seed)
        for layer in self.spec:
            if layer.has_weights:
                shape = layer.weight_shape()
                fan_in = math.prod(shape[1:])
                self.params[f"{layer.id}.weight"] = Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in))
                if layer.bias:
                    self.params[f"{layer.id}.bias"] = Tensor(np.zeros(layer.out_channels))
            elif layer.kind == "batchnorm":
                c = self.shapes[layer.id][0]
                self.params[f"{layer.id}.gamma"] = Tensor(np.ones(c))
                self.params[f"{layer.id}.beta"] = Tensor(np.zeros(c))
                self.buffers[f"{layer.id}.running_mean"] = np.zeros(c)
                self.buffers[f"{layer.id}.running_var"] = np.ones(c)

    # -- state helpers -----------------------------------------------------

    def weight(self, layer_id: str) -> np.ndarray:
        return self.params[f"{layer_id}.weight"].data

    def weight_items(self) -> list[tuple[str, np.ndarray]]:
        return [(k, t.data) for k, t in sorted(self.params.items())]

    def weights_hash(self) -> str:
        return hash_arrays(self.weight_items())

    def state_hash(self) -> str:
        return hash_arrays(self.weight_items() + sorted(self.buffers.items()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.params = {k: t.copy() for k, t in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.metadata = copy.deepcopy(self.metadata)
        other._tape = None
        return other

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- execution ---------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        masks: Optional[Mapping[str, np.ndarray]] = None,
        scales: Optional[Mapping[str, float]] = None,
        weights: Optional[Mapping[str, np.ndarray]] = None,
        scale_on_weights: bool = False,
    ) -> np.ndarray:
        """Run the network and return logits.

        ``masks`` multiply a layer's weights elementwise (drop-connect);
        ``scales`` multiply a layer's pre-bias output, or its effective weights
        when ``scale_on_weights`` is set; ``weights`` replace a layer's stored
        weights outright (crossbar read-back). In training mode batch-norm uses
        batch statistics, updates its running statistics and a tape is kept
        for :meth:`backward`.
        """
        masks = masks or {}
        scales = scales or {}
        weights = weights or {}
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.spec.input_shape}")
        acts: dict[str, np.ndarray] = {INPUT: x}
        tape = [] if training else None
        for layer in self.spec:
            ins = [acts[s] for s in layer.inputs]
            out, cache = self._layer_forward(layer, ins, training, masks, scales, weights, scale_on_weights)
            check_finite(out, f"forward of layer {layer.id!r}")
            acts[layer.id] = out
            if tape is not None:
                tape.append((layer, cache))
        if training:
            self._tape = tape
        return acts[self.spec.output]

    def _layer_forward(self, layer: LayerSpec, ins, training, masks, scales, weights, scale_on_weights):
        kind = layer.kind
        lid = layer.id
        if kind == "residual-add":
            out = ins[0].copy()
            for extra in ins[1:]:
                out += extra
            return out, None
        x = ins[0]
        if kind == "relu":
            return np.maximum(x, 0.0), x > 0
        if kind == "avgpool":
            return F.avgpool_forward(x, layer.kernel), x.shape
        if kind == "batchnorm":
            gamma = self.params[f"{lid}.gamma"].data
            beta = self.params[f"{lid}.beta"].data
            if not training:
                rm = self.buffers[f"{lid}.running_mean"]
                rv = self.buffers[f"{lid}.running_var"]
                return F.batchnorm_forward_eval(x, gamma, beta, rm, rv, self.bn.eps), None
            with np.errstate(over="ignore"):
                out, cache = F.batchnorm_forward_train(x, gamma, beta, self.bn.eps)
            check_finite(cache[4], f"batch variance of layer {lid!r}")
            self._update_running_stats(lid, cache, x)
            return out, cache

        # conv2d / fc
        w = weights.get(lid)
        if w is None:
            w = self.params[f"{lid}.weight"].data
        mask = masks.get(lid)
        if mask is not None:
            w = w * mask
        scale = scales.get(lid, 1.0)
        if scale != 1.0 and scale_on_weights:
            w = w * scale
        if kind == "conv2d":
            out = F.conv2d_forward(x, w, layer.stride, layer.padding, layer.groups)
        else:
            out = F.fc_forward(x, w, None)
        if scale != 1.0 and not scale_on_weights:
            out = out * scale
        if layer.bias:
            b = self.params[f"{lid}.bias"].data
            out = out + (b.reshape(1, -1, 1, 1) if kind == "conv2d" else b)
        return out, (x, w, mask, scale if not scale_on_weights else 1.0, scale if scale_on_weights else 1.0)

    def _update_running_stats(self, lid: str, cache, x: np.ndarray) -> None:
        _, _, _, mean, var = cache
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        m = self.bn.momentum
        rm = self.buffers[f"{lid}.running_mean"]
        rv = self.buffers[f"{lid}.running_var"]
        self.buffers[f"{lid}.running_mean"] = (1 - m) * rm + m * mean
        self.buffers[f"{lid}.running_var"] = np.maximum((1 - m) * rv + m * unbiased, 0.0)

    def backward(self, grad_output: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate ``d loss / d logits`` through the recorded tape.

        Populates ``Tensor.grad`` on every parameter and returns the same
        gradients keyed by parameter name. Masked weight positions receive
        exactly zero gradient.
        """
        if self._tape is None:
            raise RuntimeError("backward() called before a training-mode forward()")
        tape, self._tape = self._tape, None
        grads: dict[str, np.ndarray] = {}
        dacts: dict[str, np.ndarray] = {self.spec.output: np.asarray(grad_output, dtype=np.float64)}
        for layer, cache in reversed(tape):
            dout = dacts.pop(layer.id, None)
            if dout is None:
                continue
            for src, dx in zip(layer.inputs, self._layer_backward(layer, cache, dout, grads)):
                check_finite(dx, f"backward of layer {layer.id!r}")
                if src in dacts:
                    dacts[src] = dacts[src] + dx
                else:
                    dacts[src] = dx
        self.input_grad = dacts.get(INPUT)
        for name, t in self.params.items():
            g = grads.get(name)
            t.set_grad(np.zeros_like(t.data) if g is None else check_finite(g, f"gradient of {name}"))
        return {name: t.grad for name, t in self.params.items()}

    def _layer_backward(self, layer: LayerSpec, cache, dout, grads) -> list[np.ndarray]:
        kind = layer.kind
        lid = layer.id
        if kind == "residual-add":
            return [dout] * len(layer.inputs)
        if kind == "relu":
            return [dout * cache]
        if kind == "avgpool":
            return [F.avgpool_backward(dout, cache, layer.kernel)]
        if kind == "batchnorm":
            dx, dgamma, dbeta = F.batchnorm_backward(dout, self.params[f"{lid}.gamma"].data, cache)
            grads[f"{lid}.gamma"] = dgamma
            grads[f"{lid}.beta"] = dbeta
            return [dx]
        x, w, mask, out_scale, w_scale = cache
        if layer.bias:
            axes = (0, 2, 3) if kind == "conv2d" else (0,)
            grads[f"{lid}.bias"] = dout.sum(axis=axes)
        if out_scale != 1.0:
            dout = dout * out_scale
        if kind == "conv2d":
            dx, dw = F.conv2d_backward(dout, x, w, layer.stride, layer.padding, layer.groups)
        else:
            dx, dw, _ = F.fc_backward(dout, x, w)
        if w_scale != 1.0:
            dw = dw * w_scale
        if mask is not None:
            dw = dw * mask
        grads[f"{lid}.weight"] = dw
        return [dx]

    def predict(self, x: np.ndarray, batch_size: int = 512, **kwargs) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[i : i + batch_size], **kwargs).argmax(axis=1) for i in range(0, len(x), batch_size)]
        )

    def accuracy(self, x: np.ndarray, y: np.ndarray, **kwargs) -> float:
        return float(np.mean(self.predict(x, **kwargs) == y))
