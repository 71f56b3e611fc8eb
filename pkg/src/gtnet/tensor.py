"""Dense float64 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order.  Every function here returns a new array and never mutates its inputs.
Modes are 0-based axis indices, as in numpy.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_tensor(values) -> np.ndarray:
    """Coerce ``values`` to a contiguous float64 array of rank >= 1."""
    t = np.ascontiguousarray(values, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"every dimension must be >= 1, got shape {t.shape}")
    return t


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ShapeError(f"mode {mode} out of range for a rank-{ndim} tensor")


def mode_n_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Contract axis ``mode`` of ``t`` with the columns of matrix ``m``.

    ``result[..., j, ...] = sum_i m[j, i] * t[..., i, ...]``.  The size of
    ``mode`` changes from ``t.shape[mode]`` to ``m.shape[0]``.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ShapeError(
            f"mode {mode}: matrix of shape {m.shape} cannot contract a mode of size {t.shape[mode]}"
        )
    out = np.tensordot(m, t, axes=(1, mode))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def mode_n_vector_product(t: np.ndarray, v: np.ndarray, mode: int) -> np.ndarray:
    """Contract axis ``mode`` with a vector and drop that axis (``t x_n v^T``)."""
    v = np.asarray(v, dtype=np.float64)
    out = mode_n_product(t, v.reshape(1, -1), mode)
    if out.ndim == 1:
        return out
    return np.squeeze(out, axis=mode)


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization with Kolda-Bader column ordering.

    Entry ``t[i_0, ..., i_{N-1}]`` lands in row ``i_mode`` and column
    ``sum_{k != mode} i_k * prod_{m < k, m != mode} I_m``; the remaining
    indices are enumerated with the lowest axis varying fastest.
    """
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t.ndim, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    m = np.asarray(m, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), mode)
    rest = int(np.prod([s for k, s in enumerate(shape) if k != mode]))
    if m.ndim != 2 or m.shape != (shape[mode], rest):
        raise ShapeError(f"matrix of shape {m.shape} cannot fold into {shape} along mode {mode}")
    moved = (shape[mode],) + tuple(s for k, s in enumerate(shape) if k != mode)
    return np.ascontiguousarray(np.moveaxis(np.reshape(m, moved, order="F"), 0, mode))


def is_channel_vector(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == 3 and b.ndim == 1 and b.shape[0] == a.shape[0]


def check_binary(a: np.ndarray, b: np.ndarray) -> bool:
    """Validate a binary elementwise pair; return True for channel broadcast.

    Allowed: identical shapes, or ``a`` of shape (C, H, W) with ``b`` of
    shape (C,).  Anything else is a :class:`ShapeError`.
    """
    if a.shape == b.shape:
        return False
    if is_channel_vector(a, b):
        return True
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape} (only per-channel broadcast allowed)")


def _expand(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return b[:, None, None] if check_binary(a, b) else b


def add(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a + _expand(a, b)


def sub(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a - _expand(a, b)


def mul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a * _expand(a, b)


def add_scalar(a, s: float):
    return np.asarray(a, dtype=np.float64) + float(s)


def mul_scalar(a, s: float):
    return np.asarray(a, dtype=np.float64) * float(s)


def tanh(a):
    return np.tanh(np.asarray(a, dtype=np.float64))


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a):
    return np.maximum(np.asarray(a, dtype=np.float64), 0.0)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
}


def elementwise(op: str, a, b=None):
    """Dispatch a named elementwise operation (see ``ELEMENTWISE``)."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if b is None else fn(a, b)


def global_max_pool(t) -> np.ndarray:
    """Per-channel maximum of a (C, H, W) map."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeError(f"global_max_pool expects a (C, H, W) map, got rank {t.ndim}")
    return t.reshape(t.shape[0], -1).max(axis=1)


def global_max_argmax(t) -> np.ndarray:
    """Flat (h * W + w) index of the first maximum per channel, in scan order."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) map, got rank {t.ndim}")
    return t.reshape(t.shape[0], -1).argmax(axis=1)
