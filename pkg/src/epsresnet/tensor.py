"""Dense tensors with reverse-mode automatic differentiation.

The computation graph is built implicitly as operations run (define-by-run):
each result records its parent tensors and a closure that maps the output
gradient to parent gradients. `Tensor.backward()` walks the tape once in
reverse topological order, accumulating gradients in fixed parent-index
order so results are bit-reproducible.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericFaultError, ShapeError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = True


def resolve_dtype(name) -> np.dtype:
    """Map a config string ('f32'/'f64') or dtype-like to a numpy dtype."""
    if isinstance(name, str):
        table = {"f32": np.float32, "float32": np.float32,
                 "f64": np.float64, "float64": np.float64}
        if name not in table:
            raise ValueError(f"unknown dtype {name!r}; expected f32 or f64")
        return np.dtype(table[name])
    return np.dtype(name)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / statistics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the NaN/Inf guard on op outputs (on by default)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _assert_finite(data: np.ndarray, op: str) -> None:
    # A plain sum propagates any NaN/Inf and avoids a temporary bool array.
    if not np.isfinite(np.sum(data)):
        bad = np.argwhere(~np.isfinite(data))
        where = tuple(bad[0]) if bad.size else "?"
        raise NumericFaultError(f"non-finite value produced by '{op}' at index {where}")


class Tensor:
    """N-dimensional array with an optional gradient slot.

    `data` is always a contiguous numpy array of float32 or float64.
    Gradients appear on `grad` after `backward()` for tensors created with
    `requires_grad=True`; intermediate gradients are discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *,
                 op: str = "leaf",
                 _parents: tuple = (),
                 _backward_fn: Callable | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"

    # Small operator surface; layer ops live in epsresnet.ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        `self` must be a scalar produced by a recorded forward pass.
        """
        if self.size != 1:
            raise StateError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward_fn is None and not self._parents:
            if not self.requires_grad:
                raise StateError("backward() called on a tensor with no recorded graph")
        order = trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def trace(output: Tensor) -> list[Tensor]:
    """Topological order of the tape reachable from `output` (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable, op: str) -> Tensor:
    """Record one op result on the tape (or a plain tensor when untracked)."""
    if _finite_checks:
        _assert_finite(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data, op=op)


# --- primitive ops used by the engine itself -------------------------------

def identity(x: Tensor) -> Tensor:
    return make_op(x.data.copy(), (x,), lambda g: (g,), "identity")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * x.dtype.type(c), (x,),
                   lambda g: (g * x.dtype.type(c),), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return make_op(x.data + x.dtype.type(c), (x,), lambda g: (g,), "shift")


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, (x,), lambda g: (-g,), "neg")


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)
    return make_op(np.sum(x.data, keepdims=False).reshape(()), (x,), backward, "sum")


# --- gradient verification --------------------------------------------------

class FiniteDiffReport:
    """Result of comparing autodiff gradients against central differences."""

    def __init__(self, name: str, worst_rel: float, worst_index: tuple,
                 tolerance: float):
        self.name = name
        self.worst_rel = worst_rel
        self.worst_index = worst_index
        self.tolerance = tolerance
        self.passed = worst_rel <= tolerance

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"FiniteDiffReport({self.name}: worst_rel={self.worst_rel:.3e} "
                f"at {self.worst_index}, tol={self.tolerance:.1e}, {status})")


def finite_diff_check(build_loss: Callable[[], Tensor], leaves: dict[str, Tensor],
                      tolerance: float = 1e-6, h: float = 1e-5,
                      max_elements: int | None = None,
                      rng: np.random.Generator | None = None) -> list[FiniteDiffReport]:
    """Compare autodiff gradients with (f(x+h)-f(x-h))/2h per element.

    `build_loss` must rebuild the graph from the current leaf values and
    return a scalar loss. Leaves should be float64; f32 differences are too
    noisy for tight tolerances. When `max_elements` is set, a random subset
    of each leaf is probed (seeded via `rng`).
    """
    for name, leaf in leaves.items():
        if leaf.dtype != np.float64:
            raise StateError(f"finite_diff_check requires float64 leaves; {name} is {leaf.dtype}")
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    reports = []
    for name, leaf in leaves.items():
        auto = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        flat = leaf.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=max_elements, replace=False)
            idxs.sort()
        worst_rel, worst_index = 0.0, ()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = auto.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > worst_rel:
                worst_rel = rel
                worst_index = np.unravel_index(i, leaf.shape)
        reports.append(FiniteDiffReport(name, worst_rel, worst_index, tolerance))
    return reports
