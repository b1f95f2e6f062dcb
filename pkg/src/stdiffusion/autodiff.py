"""Small reverse-mode autodiff over dense float64 arrays.

Every op returns a new :class:`Tensor`. When any input requires grad the
output records its parents and a closure mapping the output gradient to
input gradients; :meth:`Tensor.backward` walks that graph in reverse
topological order, visiting each node once.

Gradients accumulate across ``backward`` calls until :func:`zero_grad`.
Broadcasting is limited to adding a bias vector to every row of a matrix;
every other shape mismatch raises :class:`ShapeError`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


@contextmanager
def no_grad():
    """Ops inside this block record no graph."""
    prev = getattr(_state, "off", False)
    _state.off = True
    try:
        yield
    finally:
        _state.off = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by " + getattr(fn, "__qualname__", "op"))
    if not getattr(_state, "off", False) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of matrix ``x`` by scalar ``w[i]``."""
    if x.data.ndim != 2 or w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: {x.shape} rows vs weights {w.shape}")
    xd, wd = x.data, w.data
    return _make(xd * wd[:, None], (x, w), lambda g: (g * wd[:, None], (g * xd).sum(axis=1)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax. Entries where ``mask`` is False get weight exactly 0."""
    if x.data.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs input {z.shape}")
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax mask leaves an empty row")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.shape[d] != parts[0].shape[d] for d in range(nd) if d != ax
        ):
            raise ShapeError(
                f"concat axis {axis}: {[q.shape for q in parts]} disagree off-axis"
            )
    sizes = [p.shape[ax] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, grad_fn)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got {x.shape}")
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), grad_fn)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"columns needs a matrix, got {x.shape}")
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop].copy(), (x,), grad_fn)


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix as a 1-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"column needs a matrix, got {x.shape}")
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _make(x.data[:, j].copy(), (x,), grad_fn)


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all entries."""
    _check_same(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor upstream."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between autodiff and central differences of ``fn`` at ``point``.

    Relative error per coordinate is ``|a - c| / max(|a|, |c|, floor * max(1, |f|))``.
    Round-off in a central difference is about eps * |f| / step (5e-11 for
    |f| = 2, step = 1e-5), so gradients far below ``floor * |f|`` cannot be
    resolved in relative terms; they are held to an absolute error instead.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = x.grad.ravel()
    flat = x0.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        try:
            f_hi = float(fn(Tensor(hi.reshape(x0.shape))).data)
            f_lo = float(fn(Tensor(lo.reshape(x0.shape))).data)
        except FloatingPointError as exc:
            raise FloatingPointError(f"coordinate {i}: {exc}") from exc
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError(f"non-finite function value perturbing coordinate {i}")
        numeric[i] = (f_hi - f_lo) / (2 * step)
    scale = floor * max(1.0, abs(float(out.data)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
