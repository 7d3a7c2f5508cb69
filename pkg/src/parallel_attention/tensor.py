"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a backward rule. ``backward``
orders the graph with a depth-first post-order walk over parents in argument
order, so gradient accumulation happens in a fixed sequence and repeated runs
produce bit-identical gradients.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, VocabularyError

DTYPE = np.float64

# Finite-value assertions on every op output; off by default for speed.
DEBUG = os.environ.get("PARALLEL_ATTENTION_DEBUG", "") not in ("", "0")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> "GradTape":
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    if DEBUG:
        assert np.all(np.isfinite(data)), f"non-finite output from {op}"
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out._op = op
    return out


class GradTape:
    """Reverse-ready operation order for one scalar loss.

    ``nodes`` lists every tensor reachable from the loss, parents before
    children. Replaying it backwards applies each recorded rule exactly once.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes = _topological(loss)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        loss = self.loss
        if loss._consumed:
            raise ContractError("backward already ran on this loss; rebuild the graph first")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        loss._consumed = True
        # free the graph so intermediates can be collected
        for node in self.nodes:
            node._parents = ()
            node._backward = None


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed push keeps the first parent visited first
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: GradTape | None = None) -> GradTape:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this loss; rebuild the graph first")
    if tape is None:
        tape = GradTape(loss)
    elif tape.loss is not loss:
        raise ContractError("tape was recorded for a different loss")
    tape.backward()
    return tape


def _suffix_broadcast(a: tuple, b: tuple) -> bool:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if not _suffix_broadcast(a.shape, b.shape):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not suffix-compatible")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_tensors(items: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally shaped tensors, accumulated left to right."""
    if not items:
        raise ContractError("add_tensors needs at least one operand")
    shape = items[0].shape
    for t in items:
        if t.shape != shape:
            raise DimensionError(f"add_tensors: shapes {shape} and {t.shape} differ")
    total = items[0].data.copy()
    for t in items[1:]:
        total += t.data
    return _node(total, tuple(items), lambda g: tuple(g for _ in items), "add_n")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), rule, "matmul")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), rule, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), rule, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-6) -> Tensor:
    """Normalize each last-axis slice to zero mean and unit variance, then apply gain and bias.

    ``gain``/``bias`` of ``None`` give the parameter-free normalization.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: parameter shape {p.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def rule(g):
        gx = g * gain.data if gain is not None else g
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _node(out, parents, rule, "layer_norm")


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = tuple(items)
    if not items:
        raise ContractError("concat needs at least one operand")
    ref = items[0].shape
    ax = axis % len(ref)
    for t in items:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in items])[:-1]
    return _node(np.concatenate([t.data for t in items], axis=ax), items,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def swapaxes(x: Tensor, a1: int = -1, a2: int = -2) -> Tensor:
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``out[...] = table[ids[...]]``."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)][0]
        raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {n}")
    shape = table.shape

    def rule(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), rule, "gather")


def masked_fill(x: Tensor, allowed: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``allowed`` is False with ``value`` (no gradient there)."""
    keep = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
    return _node(np.where(keep, x.data, value), (x,), lambda g: (np.where(keep, g, 0.0),), "masked_fill")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)

