"""Forward and backward kernels for the layer kinds the networks use.

All kernels work on NCHW float64 arrays. Each ``*_forward`` returns the
output together with whatever the matching ``*_backward`` needs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Direct 2-D cross-correlation, ``out[b,m,i,j] = sum_{n,k,s} x[b,n,i*st+k,j*st+s] * w[m,n,k,s]``."""
    n, c, h, wd = x.shape
    m, cg, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"only square kernels are supported, got {kh}x{kw}")
    if c != cg * groups or m % groups:
        raise ValueError(f"conv channels mismatch: input has {c} channels, weights {w.shape} with groups={groups}")
    if groups == c and m == c:
        return _depthwise_forward(x, w, stride, padding)
    win = _windows(x, kh, stride, padding)
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, M)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ho, wo = win.shape[2], win.shape[3]
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = w.reshape(groups, m // groups, cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg)
    return out.reshape(n, m, ho, wo)


def conv2d_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` with respect to ``x`` and ``w``."""
    n, c, h, wd = x.shape
    m, cg, k, _ = w.shape
    if groups == c and m == c:
        return _depthwise_backward(dout, x, w, stride, padding)
    win = _windows(x, k, stride, padding)
    ho, wo = win.shape[2], win.shape[3]
    if groups == 1:
        dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (M, C, k, k)
        dcol = np.tensordot(dout, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        dcol = dcol.transpose(0, 3, 1, 2, 4, 5)
    else:
        dg = dout.reshape(n, groups, m // groups, ho, wo)
        wing = win.reshape(n, groups, cg, ho, wo, k, k)
        wg = w.reshape(groups, m // groups, cg, k, k)
        dw = np.einsum("ngohw,ngchwij->gocij", dg, wing).reshape(w.shape)
        dcol = np.einsum("ngohw,gocij->ngchwij", dg, wg).reshape(n, c, ho, wo, k, k)

    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcol[..., i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw


def _pad(x, padding):
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _depthwise_forward(x, w, stride, padding):
    # one filter per channel: k*k shifted multiply-adds beat a generic einsum
    k = w.shape[2]
    xp = _pad(x, padding)
    ho = conv_output_size(x.shape[2], k, stride, padding)
    wo = conv_output_size(x.shape[3], k, stride, padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * w[None, :, 0, i, j, None, None]
    return out


def _depthwise_backward(dout, x, w, stride, padding):
    k = w.shape[2]
    xp = _pad(x, padding)
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros(xp.shape)
    dw = np.zeros(w.shape)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dw[:, 0, i, j] = (dout * xp[sl]).sum(axis=(0, 2, 3))
            dxp[sl] += dout * w[None, :, 0, i, j, None, None]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw


def batchnorm_forward_train(x, gamma, beta, eps):
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    clamped = var < eps
    denom = np.sqrt(np.maximum(var, eps))
    xhat = (x - mean.reshape(shape)) / denom.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, denom, clamped, mean, var)


def batchnorm_forward_eval(x, gamma, beta, running_mean, running_var, eps):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    denom = np.sqrt(np.maximum(running_var, eps))
    xhat = (x - running_mean.reshape(shape)) / denom.reshape(shape)
    return gamma.reshape(shape) * xhat + beta.reshape(shape)


def batchnorm_backward(dout, gamma, cache):
    """Backward for training-mode batch norm.

    Channels whose batch variance fell below the floor were normalized by a
    constant, so only the mean term propagates for them.
    """
    xhat, denom, clamped, _, _ = cache
    axes = (0,) + tuple(range(2, dout.ndim))
    shape = (1, -1) + (1,) * (dout.ndim - 2)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    mean_dxhat = dxhat.mean(axis=axes)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
    mean_dxhat_xhat = np.where(clamped, 0.0, mean_dxhat_xhat)
    dx = (dxhat - mean_dxhat.reshape(shape) - xhat * mean_dxhat_xhat.reshape(shape)) / denom.reshape(shape)
    return dx, dgamma, dbeta


def avgpool_forward(x: np.ndarray, kernel: int) -> np.ndarray:
    """Non-overlapping average pooling; ``kernel == 0`` pools globally."""
    if kernel == 0:
        return x.mean(axis=(2, 3), keepdims=True)
    win = _windows(x, kernel, kernel, 0)
    return win.mean(axis=(4, 5))


def avgpool_backward(dout: np.ndarray, x_shape: tuple[int, ...], kernel: int) -> np.ndarray:
    n, c, h, w = x_shape
    if kernel == 0:
        return np.broadcast_to(dout / (h * w), x_shape).copy()
    dx = np.zeros(x_shape)
    ho, wo = dout.shape[2], dout.shape[3]
    share = dout / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + kernel * ho : kernel, j : j + kernel * wo : kernel] += share
    return dx


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    out = x.reshape(x.shape[0], -1) @ w.T
    if b is not None:
        out = out + b
    return out


def fc_backward(dout, x, w):
    x2 = x.reshape(x.shape[0], -1)
    dw = dout.T @ x2
    db = dout.sum(axis=0)
    dx = (dout @ w).reshape(x.shape)
    return dx, dw, db


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
