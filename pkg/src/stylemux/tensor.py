"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` sorts the graph topologically
(a :class:`GradTape`) and visits each node once, accumulating gradients
additively so that fan-out and weight reuse work.

Math runs in float32 by default; :func:`precision` switches to float64 for
gradient-check tests.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An op was called outside its preconditions."""


_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = get_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        dtype = get_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.size)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    else:
        out.op = op
    return out


# --------------------------------------------------------------------------
# tape and backward
# --------------------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, seen = [], set()
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

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> GradTape:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = GradTape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def _check_bias_like(a: Tensor, b: Tensor, opname: str) -> bool:
    """True if ``b`` is broadcast over the last dim of ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} incompatible")


def _sum_to_last(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias_like(a, b, "add")

    def fn(g):
        return g, (_sum_to_last(g) if bias else g)

    return _node(a.data + b.data, (a, b), fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_bias_like(a, b, "mul")

    def fn(g):
        gb = g * a.data
        return g * b.data, (_sum_to_last(gb) if bias else gb)

    return _node(a.data * b.data, (a, b), fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (masks, positional codes); numpy broadcasting applies."""
    out = a.data + np.asarray(const, dtype=a.data.dtype)
    if out.shape != a.shape:
        raise ShapeError(f"add_const would change shape {a.shape} -> {out.shape}")
    return _node(out, (a,), lambda g: (g,), "add_const")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), fn, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), fn, "getitem")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    out = a.data.sum(axis=axis)
    return _node(np.asarray(out), (a,), fn, "sum")


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient flows to the first maximal entry."""
    arg = np.expand_dims(a.data.argmax(axis=axis), axis)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis)
        return (full,)

    return _node(np.take_along_axis(a.data, arg, axis).squeeze(axis), (a,), fn, "max")


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=-1))

    return _node(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), fn, "concat")


# --------------------------------------------------------------------------
# neural-network ops
# --------------------------------------------------------------------------


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    y = _softmax_np(x.data, axis)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_last(g * xhat), _sum_to_last(g)

    return _node(out, (x, gain, bias), fn, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n}): min={ids.min()} max={ids.max()}")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), fn, "embedding")


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Rows whose target equals ``ignore_index`` contribute nothing and are not
    counted in the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {targets.shape[0]} targets")
    mask = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    count = int(mask.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    safe = np.where(mask, targets, 0)
    nll = lse - z[np.arange(n), safe]
    loss = (nll * mask).sum() / max(count, 1)

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), safe] -= 1.0
        p *= (mask / max(count, 1))[:, None].astype(p.dtype)
        return (p * g,)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), fn, "cross_entropy")
