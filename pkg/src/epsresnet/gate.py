"""Threshold gate that zeroes a residual response when it is uniformly small.

Two interchangeable realizations:

* ``exact``: branch on the per-sample max of |response|. This is the
  production path; it is overflow-free and cheap.
* ``circuit``: the literal network of four ReLU layers and one
  multiplicative gate. Kept as a cross-check oracle and a
  faithful-architecture mode; it needs float64 because of the large
  constant it multiplies by.

Both agree everywhere except when the circuit's internal sum lands in the
open interval (0, 1/L), which shrinks to nothing as L grows. The gate is
per sample over the whole response (all channels and positions), and the
backward rule treats the on/off indicator as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op
from . import tensor as T


@dataclass
class GateConfig:
    epsilon: float
    big_L: float = 1e9
    realization: str = "exact"  # exact | circuit

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.realization == "circuit" and self.big_L < 1e6:
            raise ValueError(f"big_L must be >= 1e6 for the circuit, got {self.big_L}")
        if self.realization not in ("exact", "circuit"):
            raise ValueError(f"unknown gate realization {self.realization!r}")


@dataclass
class GateOutput:
    s: Tensor            # gated residual, same shape as the input
    t: np.ndarray        # per-sample indicator, shape (B,)


def sample_max_abs(residual: np.ndarray) -> np.ndarray:
    """Max of |x| over everything but the batch axis."""
    b = residual.shape[0]
    return np.abs(residual.reshape(b, -1)).max(axis=1)


def gate_indicator(residual: np.ndarray, epsilon: float) -> np.ndarray:
    """1 where any response element exceeds epsilon in magnitude, else 0.

    The boundary |x| == epsilon counts as off, matching what the ReLU
    circuit computes there.
    """
    return (sample_max_abs(residual) > epsilon).astype(np.uint8)


def sparsify(residual: Tensor, cfg: GateConfig, force_off: bool = False) -> GateOutput:
    """Gate a batch of residual responses; dispatches on cfg.realization."""
    if cfg.realization == "circuit" and not force_off:
        return relu_circuit(residual, cfg)
    return _sparsify_exact(residual, cfg, force_off)


def _sparsify_exact(residual: Tensor, cfg: GateConfig, force_off: bool) -> GateOutput:
    b = residual.shape[0]
    if force_off:
        t = np.zeros(b, dtype=np.uint8)
        s = Tensor(np.zeros_like(residual.data), op="sparsify_off")
        return GateOutput(s, t)
    t = gate_indicator(residual.data, cfg.epsilon)
    keep = t.astype(bool).reshape((b,) + (1,) * (residual.data.ndim - 1))
    zero = residual.dtype.type(0)
    out = np.where(keep, residual.data, zero)

    def backward(g):
        # The indicator is a constant in the backward pass: gated samples
        # feed exactly zero gradient into the residual branch.
        return (np.where(keep, g, g.dtype.type(0)),)

    return GateOutput(make_op(out, (residual,), backward, "sparsify"), t)


def _sum_per_sample(x: Tensor) -> Tensor:
    b = x.shape[0]
    flat_shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(
            g.reshape((b,) + (1,) * (len(flat_shape) - 1)), flat_shape).copy(),)

    return make_op(x.data.reshape(b, -1).sum(axis=1), (x,), backward, "sum_per_sample")


def _mul_per_sample(x: Tensor, t: Tensor) -> Tensor:
    b = x.shape[0]
    tb = t.data.reshape((b,) + (1,) * (x.data.ndim - 1))

    def backward(g):
        dx = g * tb
        dt = (g * x.data).reshape(b, -1).sum(axis=1)
        return (dx, dt)

    return make_op(x.data * tb, (x, t), backward, "mul_per_sample")


def relu_circuit(residual: Tensor, cfg: GateConfig) -> GateOutput:
    """Literal gate: relu(x-eps), relu(-x-eps), summed, then two affine
    ReLUs that squash the sum into an indicator multiplied onto the input.

    Runs in float64 to keep big_L from overflowing; raises otherwise.
    """
    if residual.dtype != np.float64:
        raise ValueError("relu_circuit requires float64 inputs")
    from .ops import relu
    eps = float(cfg.epsilon)
    big_l = float(cfg.big_L)
    pos = relu(T.shift(residual, -eps))
    negv = relu(T.shift(T.neg(residual), -eps))
    total = _sum_per_sample(T.add(pos, negv))
    u = relu(T.shift(T.scale(total, -big_l), 1.0))   # relu(1 - L * sum)
    t = relu(T.shift(T.neg(u), 1.0))                 # relu(1 - u)
    s = _mul_per_sample(residual, t)
    return GateOutput(s, t.data.copy())
