"""Differentiable primitives.

Shapes must match exactly for elementwise ops; the only broadcasts are the
explicit row-wise ones (``add_row``, ``mul_row``) and ``mul_scalar``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a, s) -> Tensor:
    """Multiply every entry of ``a`` by the single-element tensor ``s``."""
    a, s = as_tensor(a), as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"mul_scalar: expected a single-element scale, got {s.shape}")
    sv = s.data.reshape(())
    return make_node(
        a.data * sv,
        (a, s),
        lambda g: (g * sv, np.reshape(np.sum(g * a.data), s.shape)),
    )


def add_row(a, v) -> Tensor:
    """(M, N) + (N,) broadcast across rows."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.shape != (a.shape[1],):
        raise ShapeError(f"add_row: cannot add {v.shape} to rows of {a.shape}")
    return make_node(a.data + v.data, (a, v), lambda g: (g, g.sum(axis=0)))


def mul_row(a, v) -> Tensor:
    """(M, N) * (N,) broadcast across rows."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.shape != (a.shape[1],):
        raise ShapeError(f"mul_row: cannot scale rows of {a.shape} by {v.shape}")
    return make_node(
        a.data * v.data, (a, v), lambda g: (g * v.data, (g * a.data).sum(axis=0))
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return make_node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {orig} -> {shape}: {exc}") from None
    return make_node(out, (a,), lambda g: (g.reshape(orig),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return make_node(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    return make_node(
        np.where(take_a, a.data, b.data), (a, b), lambda g: (g * take_a, g * ~take_a)
    )


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(out, (a,), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape
    return make_node(a.data.mean(), (a,), lambda g: (np.full(shape, g / n),))


def index(a, key) -> Tensor:
    """Numpy indexing (basic or integer-array); gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_node(a.data[key], (a,), backward)


def take_rows(a, rows) -> Tensor:
    """Gather rows of a 2D tensor; repeated rows accumulate gradient."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return make_node(a.data[rows], (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_node(out, tuple(tensors), backward)


def max_axis(a, axis: int) -> Tensor:
    """Max-reduce along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_node(out, (a,), backward)


def segment_max(a, segment_ids, n_segments: int) -> Tensor:
    """Row-wise max of a 2D tensor within each segment; empty segments yield zeros."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((n_segments, a.shape[1]))
    winners = np.full((n_segments, a.shape[1]), -1, dtype=np.int64)
    for s in range(n_segments):
        rows = np.flatnonzero(segment_ids == s)
        if rows.size == 0:
            continue
        local = np.argmax(a.data[rows], axis=0)
        winners[s] = rows[local]
        out[s] = a.data[rows[local], np.arange(a.shape[1])]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        cols = np.broadcast_to(np.arange(shape[1]), winners.shape)
        m = winners >= 0
        np.add.at(full, (winners[m], cols[m]), g[m])
        return (full,)

    return make_node(out, (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return make_node(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (a,), backward)


def weighted_logsumexp(a, log_weights) -> Tensor:
    """log(sum_i w_i exp(a_i)) over a 1D tensor with constant nonnegative weights."""
    a = as_tensor(a)
    lw = np.asarray(log_weights, dtype=np.float64)
    return logsumexp(add(a, Tensor(lw)), axis=-1)
