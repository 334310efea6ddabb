"""Differentiable primitives.

Every function takes and returns :class:`Tensor` values. Shapes are explicit:
the only implicit broadcast is the bias add over leading axes in
:func:`add_bias`. Constants (masks, indices, mixing weights) are plain numpy
arrays and never receive gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, make

MASK_VALUE = -1e30


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-D inputs are treated as a batch of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul: expected two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return make(A @ B, (a, b), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return make(A * B, (a, b), lambda g: (g * B, g * A))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` of shape ``x.shape[-1:]`` broadcast over leading axes."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def scale(x: Tensor, c: float) -> Tensor:
    return make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return make(x.data + c, (x,), lambda g: (g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1-element tensor."""
    shape = x.shape
    return make(np.array([x.data.sum()], dtype=DTYPE), (x,), lambda g: (np.full(shape, g[0], dtype=DTYPE),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes the rest exactly."""
    z = x.data if mask is None else np.where(mask, x.data, MASK_VALUE)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return make(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data
    lead = tuple(range(X.ndim - 1))

    def backward(g):
        gh = g * G
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(xhat * G + bias.data, (x, gain, bias), backward)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the result is a copy."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return make(np.array(x.data[index]), (x,), backward)


def _row_sum(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """``out[i] = sum of g[k] over k with idx[k] == i`` for rows of g."""
    out = np.zeros((n,) + g.shape[1:], dtype=DTYPE)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` (first axis) picked by an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def backward(g):
        if len(shape) == 1:
            return (np.bincount(idx.ravel(), weights=g.ravel(), minlength=shape[0]).astype(DTYPE),)
        return (_row_sum(idx.ravel(), g.reshape((idx.size,) + shape[1:]), shape[0]),)

    return make(x.data[idx], (x,), backward)


def scatter_rows(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place row k of ``x`` at row ``idx[k]`` of an ``n``-row zero matrix (idx unique)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=DTYPE)
    out[idx] = x.data
    return make(out, (x,), lambda g: (g[idx],))


def mix_linear(x: Tensor, maps: Tensor, weights: np.ndarray) -> Tensor:
    """Row-weighted sum of linear maps: ``out[r] = sum_s weights[r, s] * x[r] @ maps[s]``.

    ``maps`` has shape (S, d, e), ``weights`` (R, S). Slots whose weight column
    is entirely zero are skipped, so they contribute nothing and receive a zero
    gradient.
    """
    X, M = x.data, maps.data
    if M.ndim != 3 or M.shape[1] != X.shape[-1]:
        raise ValueError(f"mix_linear: maps {M.shape} incompatible with input {X.shape}")
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != (X.shape[0], M.shape[0]):
        raise ValueError(f"mix_linear: weights {weights.shape} != ({X.shape[0]}, {M.shape[0]})")
    active = [s for s in range(M.shape[0]) if np.any(weights[:, s] != 0.0)]
    out = np.zeros((X.shape[0], M.shape[2]), dtype=DTYPE)
    for s in active:
        out += weights[:, s : s + 1] * (X @ M[s])

    def backward(g):
        dx = np.zeros_like(X)
        dm = np.zeros_like(M)
        for s in active:
            gs = weights[:, s : s + 1] * g
            dx += gs @ M[s].T
            dm[s] = X.T @ gs
        return dx, dm

    return make(out, (x, maps), backward)
