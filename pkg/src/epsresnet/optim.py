"""Heavy-ball SGD with coupled weight decay, and the two learning-rate
policies: a fixed milestone schedule, and the adaptive schedule that resets
to the base rate whenever a residual block is discarded and then decays
twice as fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericFaultError
from .tensor import Tensor


class Sgd:
    """v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v.

    Parameters that received no gradient this step (their tape branch was
    skipped) are updated with g = 0, so weight decay always applies.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 2e-4,
                 decay_bn: bool = True):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_bn = decay_bn
        self.velocity: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in params.items()}

    def _decays(self, name: str) -> bool:
        if self.decay_bn:
            return True
        return not (name.endswith(".gamma") or name.endswith(".beta"))

    def step(self) -> None:
        lr = self.lr
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.isfinite(np.sum(g)):
                raise NumericFaultError(f"non-finite gradient for parameter {name!r}")
            dt = p.data.dtype.type
            lam = dt(self.weight_decay if self._decays(name) else 0.0)
            v = self.velocity[name]
            if g is None:
                update = lam * p.data
            else:
                update = g + lam * p.data
            v *= dt(self.momentum)
            v -= dt(lr) * update
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class LrPolicy:
    """Learning-rate state machine.

    Standard phase divides the base rate by 10 at each milestone epoch.
    After the first block discard the policy switches to the adaptive
    phase: the rate snaps back to the base value and decays by 10 at the
    (shorter) adaptive milestones, counted from the most recent reset.
    """
    base_lr: float = 0.1
    standard_milestones: tuple[int, ...] = (82, 123)
    adaptive_milestones: tuple[int, ...] = (41, 61)
    phase: str = "standard"          # standard | adaptive
    epochs_since_reset: int = 0

    def __post_init__(self):
        for ms in (self.standard_milestones, self.adaptive_milestones):
            if list(ms) != sorted(set(ms)):
                raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_for_epoch(policy: LrPolicy, epoch: int) -> float:
    """Pure function of (policy, epoch); epoch counts from 0."""
    if policy.phase == "standard":
        drops = sum(1 for m in policy.standard_milestones if epoch >= m)
    else:
        drops = sum(1 for m in policy.adaptive_milestones
                    if policy.epochs_since_reset >= m)
    return policy.base_lr / (10.0 ** drops)


def on_block_discarded(policy: LrPolicy) -> LrPolicy:
    """Switch to (or restart) the adaptive phase with a fresh clock."""
    return replace(policy, phase="adaptive", epochs_since_reset=0)


def advance_epoch(policy: LrPolicy) -> LrPolicy:
    if policy.phase == "adaptive":
        return replace(policy, epochs_since_reset=policy.epochs_since_reset + 1)
    return policy
