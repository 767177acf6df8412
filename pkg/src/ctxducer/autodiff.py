"""Dense float64 tensors with reverse-mode automatic differentiation.

A small numpy-backed tape: each operation records its parent tensors and a
backward closure, and ``Tensor.backward()`` replays the closures in reverse
topological order. Values are frozen after construction; gradients live in a
separate slot and accumulate additively until the caller clears them. Every
primitive checks its output for NaN/Inf and raises instead of propagating
silently.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .exceptions import NotFiniteError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (decode, detached contexts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("values", "grad", "_parents", "_backward")

    def __init__(self, values, _parents: tuple = (), _backward: Callable | None = None):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim and not v.flags.c_contiguous:
            v = np.ascontiguousarray(v)
        if not np.all(np.isfinite(v)):
            raise NotFiniteError(f"tensor of shape {v.shape} contains NaN or Inf")
        v.flags.writeable = False
        self.values = v
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.values.shape, dtype=np.float64)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode pass from this tensor; grads accumulate into leaves."""
        if seed is None:
            if self.values.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.values)
        order = _toposort(self)
        self.accum_grad(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(values: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(values)
    return Tensor(values, _parents=parents, _backward=backward)


def constant(values) -> Tensor:
    return Tensor(values)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched 3-D product with equal leading extent."""
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner extents differ ({av.shape} @ {bv.shape})")
    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise ShapeError(f"matmul: batched shapes incompatible ({av.shape} @ {bv.shape})")
    else:
        raise ShapeError(f"matmul: ranks must be (2,2) or (3,3), got ({av.ndim},{bv.ndim})")
    out = np.matmul(av, bv)

    def backward(g: np.ndarray) -> None:
        a.accum_grad(np.matmul(g, np.swapaxes(bv, -1, -2)))
        b.accum_grad(np.matmul(np.swapaxes(av, -1, -2), g))

    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a scalar or a last-axis bias vector."""
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        reduce_to_b = None
    elif bv.ndim == 0:
        reduce_to_b = "all"
    elif bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        reduce_to_b = "bias"
    else:
        raise ShapeError(f"add: shapes {av.shape} and {bv.shape} are not compatible")
    out = av + bv

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g)
        if reduce_to_b is None:
            b.accum_grad(g)
        elif reduce_to_b == "all":
            b.accum_grad(np.asarray(g.sum()))
        else:
            b.accum_grad(g.reshape(-1, bv.shape[0]).sum(axis=0))

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shapes {av.shape} and {bv.shape} differ")
    out = av * bv

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g * bv)
        b.accum_grad(g * av)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.values * c

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g * c)

    return _make(out, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0.0

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g * mask)

    return _make(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; each slice sums to one."""
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out).sum(axis=axis, keepdims=True)
        a.accum_grad((g - dot) * out)

    return _make(out, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``, max-shifted; the axis is reduced away."""
    av = a.values
    m = av.max(axis=axis, keepdims=True)
    out_keep = np.log(np.exp(av - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(out_keep, axis=axis)
    soft = np.exp(av - out_keep)

    def backward(g: np.ndarray) -> None:
        a.accum_grad(np.expand_dims(g, axis=axis) * soft)

    return _make(out, (a,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv = x.values
    d = xv.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gain.values + bias.values

    def backward(g: np.ndarray) -> None:
        gy = g * gain.values
        mean_gy = gy.mean(axis=-1, keepdims=True)
        mean_gy_xhat = (gy * xhat).mean(axis=-1, keepdims=True)
        x.accum_grad((gy - mean_gy - xhat * mean_gy_xhat) * inv)
        gain.accum_grad((g * xhat).reshape(-1, d).sum(axis=0))
        bias.accum_grad(g.reshape(-1, d).sum(axis=0))

    return _make(out, (x, gain, bias), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    key = [slice(None)] * a.values.ndim
    key[axis] = slice(start, stop, step)
    key = tuple(key)
    out = a.values[key].copy()

    def backward(g: np.ndarray) -> None:
        if a.grad is None:
            a.grad = np.zeros(a.values.shape, dtype=np.float64)
        a.grad[key] += g

    return _make(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    ref = parts[0].values.shape
    for p in parts[1:]:
        s = p.values.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: non-concat extents differ ({ref} vs {s})")
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            key = [slice(None)] * g.ndim
            key[axis] = slice(offset, offset + n)
            p.accum_grad(g[tuple(key)])
            offset += n

    return _make(out, tuple(parts), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.values.reshape(shape)

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g.reshape(a.values.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(a.values, axes)
    inv = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        a.accum_grad(np.transpose(g, inv))

    return _make(out, (a,), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding); backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("gather_rows: ids must be 1-D")
    n = table.values.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"gather_rows: id out of range [0, {n})")
    out = table.values[ids]

    def backward(g: np.ndarray) -> None:
        if table.grad is None:
            table.grad = np.zeros(table.values.shape, dtype=np.float64)
        np.add.at(table.grad, ids, g)

    return _make(out, (table,), backward)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """(M,J) + (N,J) -> (M,N,J) broadcast sum (joint-network lattice)."""
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"outer_add: need (M,J),(N,J), got {av.shape},{bv.shape}")
    out = av[:, None, :] + bv[None, :, :]

    def backward(g: np.ndarray) -> None:
        a.accum_grad(g.sum(axis=1))
        b.accum_grad(g.sum(axis=0))

    return _make(out, (a, b), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    av = a.values
    out = av.sum(axis=axis)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            a.accum_grad(np.full(av.shape, float(g)))
        else:
            a.accum_grad(np.broadcast_to(np.expand_dims(g, axis), av.shape).copy())

    return _make(np.asarray(out), (a,), backward)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.values.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# gradient audit


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` must be a pure scalar-valued function of its tensor argument.
    """
    y = f(x)
    if y.values.size != 1:
        raise ShapeError("grad_check: f must be scalar-valued")
    x.zero_grad()
    y.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.values)).copy()

    flat = x.values.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            hi = f(Tensor(bumped.reshape(x.values.shape))).item()
            bumped[i] = flat[i] - eps
            lo = f(Tensor(bumped.reshape(x.values.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * eps)
            if not math.isfinite(numeric[i]):
                raise NotFiniteError("grad_check: non-finite finite-difference value")
    numeric = numeric.reshape(x.values.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
