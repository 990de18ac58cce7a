"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks the
graph once in reverse topological order. Only scalar-vs-tensor broadcasting is
implicit; anything else goes through :func:`broadcast_to`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EmptyReductionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Backward | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None): return reduce_sum(self, axis)
    def mean(self, axis=None): return reduce_mean(self, axis)
    def max(self, axis=None): return reduce_max(self, axis)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def relu(self): return relu(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: Backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, fn, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- elementwise

def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}; use broadcast_to")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)), "mul")


def _first_bad(mask: np.ndarray) -> tuple:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    zero = b.data == 0
    if zero.any():
        raise DomainError(f"division by zero at index {_first_bad(zero)}")
    bd = b.data
    out = a.data / bd

    def fn(g):
        return (_unbroadcast(g / bd, a), _unbroadcast(-g * out / bd, b))
    return _node(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = a.data <= 0
    if bad.any():
        raise DomainError(f"log of non-positive value at index {_first_bad(bad)}")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb
    return _node(out, (a, b), fn, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias row repeated over the batch; one graph node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine dimension mismatch: {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb
    return _node(out, (x, w, b), fn, "affine")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over repeated axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    src = a.shape
    lead = len(shape) - len(src)
    kept = tuple(i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def fn(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if kept:
            g = g.sum(axis=tuple(k - lead for k in kept), keepdims=True)
        return (g.reshape(src),)
    return _node(out, (a,), fn, "broadcast")


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def fn(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)
    return _node(out, (a,), fn, "take")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of nothing")
    out = np.stack([t.data for t in ts])
    return _node(out, tuple(ts), lambda g: tuple(g[i] for i in range(len(ts))), "stack")


# ---------------------------------------------------------------- reductions

def _check_reduce(a: Tensor, axis) -> None:
    if a.data.size == 0:
        raise EmptyReductionError("reduction over an empty tensor")
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.data.ndim}")


def _expand(g: np.ndarray, a: Tensor, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, a.shape)
    return np.broadcast_to(np.expand_dims(g, axis), a.shape)


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_reduce(a, axis)
    return _node(a.data.sum(axis=axis), (a,), lambda g: (_expand(g, a, axis),), "sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    _check_reduce(a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    return _node(a.data.mean(axis=axis), (a,), lambda g: (_expand(g, a, axis) / n,), "mean")


def reduce_max(a, axis=None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    _check_reduce(a, axis)
    if axis is None:
        flat = int(np.argmax(a.data))

        def fn(g):
            full = np.zeros(a.data.size)
            full[flat] = g
            return (full.reshape(a.shape),)
        return _node(a.data.reshape(-1)[flat], (a,), fn, "max")
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _node(out, (a,), fn, "max")


def l2norm(a, axis=None) -> Tensor:
    """Euclidean norm; at an exactly-zero input the (sub)gradient is taken as 0."""
    a = as_tensor(a)
    _check_reduce(a, axis)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis))

    def fn(g):
        n = out if axis is None else np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.where(n > 0, ad * gg / safe, 0.0),)
    return _node(out, (a,), fn, "l2norm")


def elementwise(op: str, *args) -> Tensor:
    table = {"add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
             "relu": relu, "neg": neg, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def reduce(op: str, t, axis=None) -> Tensor:
    table = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max, "l2norm": l2norm}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](t, axis)


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if root.data.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- parameter vectors

class Parameters:
    """An ordered, fixed set of leaf tensors viewed as one flat vector."""

    def __init__(self, tensors: Iterable[Tensor]):
        self.tensors = list(tensors)
        self._snapshot: list[np.ndarray] | None = None

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors])

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
            for t in self.tensors])

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for t in self.tensors:
            n = t.data.size
            out.append(flat[i:i + n].reshape(t.shape))
            i += n
        if i != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, parameters need {i}")
        return out

    def assign(self, flat: np.ndarray) -> None:
        for t, v in zip(self.tensors, self.split(np.asarray(flat, dtype=np.float64))):
            t.data = v.copy()

    def add_(self, delta: np.ndarray) -> None:
        for t, v in zip(self.tensors, self.split(np.asarray(delta, dtype=np.float64))):
            t.data = t.data + v

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None

    def snapshot(self) -> None:
        self._snapshot = [t.data.copy() for t in self.tensors]

    def restore(self) -> None:
        if self._snapshot is None:
            raise StateError("restore() called without a snapshot")
        for t, v in zip(self.tensors, self._snapshot):
            t.data = v.copy()
        self._snapshot = None
