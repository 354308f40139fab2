"""Low-level CPU kernels for the hot path.

Layout conventions: activations are NHWC inside these kernels (channel
vectors are contiguous), convolution weights are laid out (kh, kw, inC, outC)
so a patch row times the reshaped weight matrix is a plain matmul. The
public NCHW operations in `ops` transpose at the boundary.

Every reduction that produces one output element runs sequentially in a
fixed order; the only threading happens inside BLAS matmuls, which do not
split the reduction axis for these shapes. Patch packing and scatter run
single-threaded on purpose: on small machines a second spinning thread pool
fights the BLAS pool and costs more than it buys.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Patch-matrix blocks are kept at most this large so they stay cache
# resident between the pack and the matmul that consumes them.
_COLS_BUDGET_BYTES = 6 << 20

_buffer_pool: dict[tuple, np.ndarray] = {}


def _scratch(rows: int, cols: int, dtype) -> np.ndarray:
    """Reusable scratch matrix; keyed by shape so layers share buffers."""
    key = (rows, cols, np.dtype(dtype).str)
    buf = _buffer_pool.get(key)
    if buf is None:
        buf = np.empty((rows, cols), dtype=dtype)
        _buffer_pool[key] = buf
    return buf


@njit(cache=True)
def _pack_patches(xp, cols, stride, ho, wo):
    # xp: (B, Hp, Wp, C) zero-padded input; cols: (B*ho*wo, 9*C)
    b, hp, wp, c = xp.shape
    for bi in range(b):
        for yy in range(ho):
            base = (bi * ho + yy) * wo
            for xx in range(wo):
                row = cols[base + xx]
                i = 0
                for ky in range(3):
                    xr = xp[bi, yy * stride + ky]
                    for kx in range(3):
                        pix = xr[xx * stride + kx]
                        for ch in range(c):
                            row[i] = pix[ch]
                            i += 1


@njit(cache=True)
def _scatter_patches_add(dxp, dcols, stride, ho, wo):
    # Transpose of _pack_patches: accumulate patch gradients into dxp.
    b, hp, wp, c = dxp.shape
    for bi in range(b):
        for yy in range(ho):
            base = (bi * ho + yy) * wo
            for xx in range(wo):
                row = dcols[base + xx]
                i = 0
                for ky in range(3):
                    dxr = dxp[bi, yy * stride + ky]
                    for kx in range(3):
                        pix = dxr[xx * stride + kx]
                        for ch in range(c):
                            pix[ch] += row[i]
                            i += 1


def _block_images(b: int, ho: int, wo: int, c9: int, itemsize: int) -> int:
    per_image = ho * wo * c9 * itemsize
    blk = max(1, _COLS_BUDGET_BYTES // max(per_image, 1))
    return min(b, blk)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None,
                    stride: int) -> np.ndarray:
    """3x3 cross-correlation, padding 1. x: (B,H,W,C); w: (3,3,C,O)."""
    b, h, wdt, c = x.shape
    o = w.shape[3]
    ho = (h + 2 - 3) // stride + 1
    wo = (wdt + 2 - 3) // stride + 1
    xp = np.zeros((b, h + 2, wdt + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    wm = np.ascontiguousarray(w.reshape(9 * c, o))
    y = np.empty((b, ho, wo, o), dtype=x.dtype)
    blk = _block_images(b, ho, wo, 9 * c, x.dtype.itemsize)
    cols = _scratch(blk * ho * wo, 9 * c, x.dtype)
    for s0 in range(0, b, blk):
        s1 = min(s0 + blk, b)
        cc = cols[:(s1 - s0) * ho * wo]
        _pack_patches(xp[s0:s1], cc, stride, ho, wo)
        np.dot(cc, wm, out=y[s0:s1].reshape((s1 - s0) * ho * wo, o))
    if bias is not None:
        y += bias
    return y


def conv3x3_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                     stride: int, need_dx: bool, need_db: bool):
    """Gradients of conv3x3_forward. Returns (dx, dw, db)."""
    b, h, wdt, c = x.shape
    o = w.shape[3]
    ho, wo = dy.shape[1], dy.shape[2]
    xp = np.zeros((b, h + 2, wdt + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    wm = np.ascontiguousarray(w.reshape(9 * c, o))
    dw = np.zeros((9 * c, o), dtype=x.dtype)
    dxp = np.zeros_like(xp) if need_dx else None
    blk = _block_images(b, ho, wo, 9 * c, x.dtype.itemsize)
    cols = _scratch(blk * ho * wo, 9 * c, x.dtype)
    for s0 in range(0, b, blk):
        s1 = min(s0 + blk, b)
        n = (s1 - s0) * ho * wo
        cc = cols[:n]
        _pack_patches(xp[s0:s1], cc, stride, ho, wo)
        dyf = dy[s0:s1].reshape(n, o)
        # Block-sequential accumulation keeps the reduction order fixed.
        dw += cc.T @ dyf
        if need_dx:
            dcols = dyf @ wm.T
            _scatter_patches_add(dxp[s0:s1], dcols, stride, ho, wo)
    db = dy.sum(axis=(0, 1, 2)) if need_db else None
    dx = dxp[:, 1:-1, 1:-1, :] if need_dx else None
    return dx, dw.reshape(3, 3, c, o), db


@njit(cache=True)
def _channel_stats(x2d, mean, var):
    # x2d: (N, C). One sequential pass per channel, excess accumulated in f64.
    n, c = x2d.shape
    s = np.zeros(c, np.float64)
    for i in range(n):
        row = x2d[i]
        for ch in range(c):
            s[ch] += row[ch]
    for ch in range(c):
        mean[ch] = s[ch] / n
    s[:] = 0.0
    for i in range(n):
        row = x2d[i]
        for ch in range(c):
            d = row[ch] - mean[ch]
            s[ch] += d * d
    for ch in range(c):
        var[ch] = s[ch] / n


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel biased mean/variance over all leading axes (C last)."""
    c = x.shape[-1]
    x2d = np.ascontiguousarray(x.reshape(-1, c))
    mean = np.empty(c, np.float64)
    var = np.empty(c, np.float64)
    _channel_stats(x2d, mean, var)
    return mean.astype(x.dtype), var.astype(x.dtype)


def subsample_pad_channels(x: np.ndarray, out_c: int) -> np.ndarray:
    """Parameter-free shortcut: stride-2 spatial subsample, zero-pad new channels."""
    b, h, w, c = x.shape
    y = np.zeros((b, (h + 1) // 2, (w + 1) // 2, out_c), dtype=x.dtype)
    y[:, :, :, :c] = x[:, ::2, ::2, :]
    return y


def subsample_pad_channels_grad(dy: np.ndarray, in_shape: tuple) -> np.ndarray:
    b, h, w, c = in_shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, ::2, ::2, :] = dy[:, :, :, :c]
    return dx
