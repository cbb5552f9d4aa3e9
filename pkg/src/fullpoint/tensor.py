"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op builds its output with :func:`_make`, which links the
output to its parents and a closure mapping the output gradient to parent
gradients. When a :class:`Tape` is active the node is also appended to it, so
the tape holds the executed ops in order; :func:`backward` replays that order
in reverse. Without an explicit tape the order is recovered by a topological
sort from the loss.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True
_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


class Tape:
    """Ordered record of the differentiable ops executed while active.

    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced NaN or Inf")
    out = Tensor._wrap(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        for tape in _ACTIVE_TAPES:
            tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch axes broadcast; 1-D operands are not accepted.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(ad, bd)
    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (int, tuple or None for all).

    Max routes its whole gradient to the first maximal entry along the
    reduced axes.
    """
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    for ax in axes:
        if x.shape[ax] == 0:
            raise DimensionError(f"cannot {kind}-reduce over empty axis {ax} of shape {x.shape}")
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    xs = x.shape

    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(np.asarray(out), (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape), xs),), "sum")
    if kind == "mean":
        count = int(np.prod([xs[a] for a in axes])) if axes else 1
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make(
            np.asarray(out), (x,), lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, xs),), "mean"
        )
    if kind == "max":
        # move reduced axes to the end and flatten them so argmax sees one axis
        rest = [i for i in range(x.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = np.transpose(x.data, perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        arg = np.argmax(flat, axis=-1)
        vals = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out = vals.reshape(kept_shape) if keepdims else vals

        def bw(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            return (np.transpose(gf.reshape(moved.shape), np.argsort(perm)),)

        return _make(np.ascontiguousarray(out), (x,), bw, "max")
    raise ContractError(f"unknown reduction kind {kind!r}")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axis, "sum", keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce(x, axis, "mean", keepdims)


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce(x, axis, "max", keepdims)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    if x.shape[ax] == 0:
        raise DimensionError(f"softmax over empty axis {ax} of shape {x.shape}")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is ``[..., C]`` and ``target`` an integer array of the leading
    shape.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    count = builtins.max(target.size, 1)
    loss = -picked.sum() / count

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], -1) - 1.0, -1)
        return (g * p / count,)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    xs = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {xs} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(xs),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    xs = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {xs} to {tuple(shape)}") from None
    return _make(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, xs),), "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of zero tensors")
    (ax,) = _norm_axis(axis, ts[0].ndim)
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def gather(x, index) -> Tensor:
    """Rows of ``x`` picked by an integer array of any shape.

    ``x`` is ``[N, ...]``; the result is ``index.shape + x.shape[1:]``. The
    backward pass scatter-adds into the source rows.
    """
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather index out of range [0, {n})")
    xs = x.shape

    width = int(np.prod(xs[1:], dtype=np.int64))
    flat = idx.reshape(-1)

    def bw(g):
        # one flat bincount over (row, column) slots; sums in input order
        slots = (flat[:, None] * width + np.arange(width)).reshape(-1)
        out = np.bincount(slots, weights=g.reshape(-1), minlength=n * width)
        return (out.reshape(xs),)

    return _make(x.data[idx], (x,), bw, "gather")


# ---------------------------------------------------------------- backward


def _topological(loss: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(loss, False)]
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
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    nodes = tape.nodes if tape is not None else _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                pg = np.array(pg, dtype=np.float64)
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors (all perturbed); ``f(x)`` must
    return a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        with no_grad():
            for ti, t in enumerate(xs):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    try:
                        flat[i] = orig + eps
                        fp = _scalar(f(x), ti, i)
                        flat[i] = orig - eps
                        fm = _scalar(f(x), ti, i)
                    except NumericError as exc:
                        raise NumericError(f"non-finite evaluation at tensor {ti}, coordinate {i}: {exc}") from exc
                    finally:
                        flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    ana = analytic[ti].reshape(-1)[i]
                    err = np.abs(ana - num) / builtins.max(1.0, np.abs(ana), np.abs(num))
                    worst = builtins.max(worst, float(err))
        return worst
    finally:
        for t, flag in zip(xs, saved_flags):
            t.requires_grad = flag
            t.grad = None


def _scalar(out: Tensor, tensor_index: int, coord: int) -> float:
    val = float(out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError(f"non-finite evaluation at tensor {tensor_index}, coordinate {coord}")
    return val
