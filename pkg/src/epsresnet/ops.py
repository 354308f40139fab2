"""Neural-network layer operations with forward and backward rules.

Public entry points follow the NCHW convention for images. The `_nhwc`
variants are the layout the compute kernels natively use; the network
forward pass stays in NHWC end to end and only the edges transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, make_op


@dataclass
class Conv2dParams:
    """3x3 (or 1x1) convolution parameters; weight is (outC, inC, kH, kW)."""
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 1


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor    # (out,)


def to_nhwc(x: Tensor) -> Tensor:
    def backward(g):
        return (np.ascontiguousarray(g.transpose(0, 3, 1, 2)),)
    return make_op(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)),
                   (x,), backward, "to_nhwc")


def to_nchw(x: Tensor) -> Tensor:
    def backward(g):
        return (np.ascontiguousarray(g.transpose(0, 2, 3, 1)),)
    return make_op(np.ascontiguousarray(x.data.transpose(0, 3, 1, 2)),
                   (x,), backward, "to_nchw")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, x.dtype.type(0)), (x,),
                   lambda g: (np.where(mask, g, g.dtype.type(0)),), "relu")


def conv2d_nhwc(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation on NHWC activations. Weight stays canonical NCHW-style."""
    o, c, kh, kw = p.weight.shape
    if x.data.shape[3] != c:
        raise ShapeError(f"conv2d: input has {x.data.shape[3]} channels, weight expects {c}")
    if kh != kw:
        raise ShapeError(f"conv2d: non-square kernel {kh}x{kw}")
    w_k = np.ascontiguousarray(p.weight.data.transpose(2, 3, 1, 0))  # (kh,kw,C,O)
    bias_arr = p.bias.data if p.bias is not None else None

    if kh == 3 and p.padding == 1:
        y = kernels.conv3x3_forward(x.data, w_k, bias_arr, p.stride)

        def backward(g):
            need_dx = x.requires_grad
            dx, dw, db = kernels.conv3x3_backward(
                x.data, w_k, g, p.stride, need_dx, p.bias is not None)
            dwn = np.ascontiguousarray(dw.transpose(3, 2, 0, 1))
            if p.bias is not None:
                return (dx, dwn, db)
            return (dx, dwn)
    else:
        y, cols, geo = _conv_generic_forward(x.data, w_k, bias_arr, p.stride, p.padding)

        def backward(g):
            need_dx = x.requires_grad
            dx, dw, db = _conv_generic_backward(
                x.data.shape, w_k, cols, g, p.stride, p.padding, geo,
                need_dx, p.bias is not None)
            dwn = np.ascontiguousarray(dw.transpose(3, 2, 0, 1))
            if p.bias is not None:
                return (dx, dwn, db)
            return (dx, dwn)

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return make_op(y, parents, backward, "conv2d")


def _conv_geometry(h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} with stride {stride}, pad {pad} "
                         f"does not fit input {h}x{w}")
    return ho, wo


def _conv_generic_forward(x, w_k, bias, stride, pad):
    b, h, w, c = x.shape
    k, _, _, o = w_k.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, ho, wo, k, k, c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)
    cols = np.ascontiguousarray(view).reshape(b * ho * wo, k * k * c)
    y = cols @ w_k.reshape(k * k * c, o)
    if bias is not None:
        y += bias
    return y.reshape(b, ho, wo, o), cols, (ho, wo)


def _conv_generic_backward(x_shape, w_k, cols, dy, stride, pad, geo, need_dx, need_db):
    b, h, w, c = x_shape
    k, _, _, o = w_k.shape
    ho, wo = geo
    dyf = dy.reshape(b * ho * wo, o)
    dw = (cols.T @ dyf).reshape(k, k, c, o)
    db = dyf.sum(axis=0) if need_db else None
    dx = None
    if need_dx:
        dcols = (dyf @ w_k.reshape(k * k * c, o).T).reshape(b, ho, wo, k, k, c)
        dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
        for ky in range(k):
            for kx in range(k):
                dxp[:, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride, :] += \
                    dcols[:, :, :, ky, kx, :]
        dx = dxp[:, pad:pad + h, pad:pad + w, :]
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """NCHW wrapper around the NHWC kernel path."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D NCHW input, got shape {x.shape}")
    return to_nchw(conv2d_nhwc(to_nhwc(x), p))


def batch_norm_nhwc(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    c = x.data.shape[-1]
    if s.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma has shape {s.gamma.shape}")
    dt = x.dtype.type
    if training:
        n = x.data.size // c
        if x.data.shape[0] < 2:
            raise ShapeError("batch_norm: training mode needs batch size >= 2")
        mean, var = kernels.channel_stats(x.data)
        invstd = dt(1.0) / np.sqrt(var + dt(s.eps))
        xhat = (x.data - mean) * invstd
        # Running statistics are training state, not part of the tape.
        m = dt(s.momentum)
        s.running_mean[...] = m * s.running_mean + (dt(1.0) - m) * mean
        s.running_var[...] = m * s.running_var + (dt(1.0) - m) * var
        y = s.gamma.data * xhat + s.beta.data
        gamma_data = s.gamma.data

        def backward(g):
            axes = (0, 1, 2) if g.ndim == 4 else (0,)
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dx = (gamma_data * invstd / dt(n)) * (
                dt(n) * g - dbeta - xhat * dgamma)
            return (dx.astype(g.dtype, copy=False), dgamma, dbeta)
    else:
        invstd = dt(1.0) / np.sqrt(s.running_var + dt(s.eps))
        xhat = (x.data - s.running_mean) * invstd
        y = s.gamma.data * xhat + s.beta.data
        gamma_data = s.gamma.data

        def backward(g):
            axes = (0, 1, 2) if g.ndim == 4 else (0,)
            return (g * gamma_data * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return make_op(y, (x, s.gamma, s.beta), backward, "batch_norm")


def batch_norm(x: Tensor, s: BatchNormState, training: bool = True) -> Tensor:
    """NCHW batch normalization (normalizes over N, H, W per channel)."""
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected 4-D NCHW input, got {x.shape}")
    return to_nchw(batch_norm_nhwc(to_nhwc(x), s, training))


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {p.weight.shape}")
    w, b = p.weight.data, p.bias.data
    y = x.data @ w.T + b

    def backward(g):
        return (g @ w, g.T @ x.data, g.sum(axis=0))

    return make_op(y, (x, p.weight, p.bias), backward, "linear")


def global_avg_pool_nhwc(x: Tensor) -> Tensor:
    b, h, w, c = x.data.shape
    scale = x.dtype.type(1.0 / (h * w))
    y = x.data.mean(axis=(1, 2), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, None, None, :], (b, h, w, c)).copy(),)

    return make_op(y, (x,), backward, "global_avg_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W per channel; NCHW input, (B, C) output."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    return global_avg_pool_nhwc(to_nhwc(x))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    b, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: {b} rows but {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: label out of range for {k} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(b), labels].mean(dtype=z.dtype)
    softmax = ez / sez

    def backward(g):
        gd = g.reshape(-1)[0]
        grad = softmax.copy()
        grad[np.arange(b), labels] -= 1.0
        return (grad * (gd / logits.dtype.type(b)),)

    return make_op(np.asarray(loss).reshape(()), (logits,), backward, "softmax_cross_entropy")
