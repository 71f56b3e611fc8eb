"""Tape-based reverse-mode differentiation over float64 numpy tensors.

Operations record themselves on the innermost active :class:`Tape` of the
current thread when at least one input requires a gradient.  Outside a tape
they just compute values, which is what inference uses.

    with Tape() as tape:
        loss = ad.sum(ad.mul(x, y))
    tape.backward(loss)
    x.grad
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Variable:
    """A tensor value plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "requires_grad", "node_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = T.as_tensor(value)
        self._grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Variable) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Variable) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Variable) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


def parameter(value, name: str | None = None) -> Variable:
    return Variable(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Variable:
    return value if isinstance(value, Variable) else Variable(np.asarray(value, dtype=np.float64))


@dataclass
class _Node:
    out: Variable
    parents: tuple
    backward: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out: Variable, parents: tuple, backward_fn) -> None:
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward_fn))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Variable) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf parameter."""
        if self.consumed:
            raise ContractError("backward already ran on this tape; reset it or record a new one")
        if loss.value.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        seed = np.ones_like(loss.value)
        loss._grad = seed
        if loss.node_id is None:
            return
        pending = {loss.node_id: seed}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = pending.pop(node.out.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id is None:
                    parent._grad = pg.copy() if parent._grad is None else parent._grad + pg
                elif parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = pg
        self.nodes.clear()


def backward(loss: Variable, tape: Tape) -> None:
    tape.backward(loss)


def _make(value: np.ndarray, parents: tuple, backward_fn) -> Variable:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Variable(value, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward_fn)
    return out


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _reduce_like(g: np.ndarray, broadcast: bool) -> np.ndarray:
    return g.sum(axis=(1, 2)) if broadcast else g


def add(a, b) -> Variable:
    a, b = constant(a), constant(b)
    bc = T.check_binary(a.value, b.value)
    return _make(T.add(a.value, b.value), (a, b), lambda g: (g, _reduce_like(g, bc)))


def sub(a, b) -> Variable:
    a, b = constant(a), constant(b)
    bc = T.check_binary(a.value, b.value)
    return _make(T.sub(a.value, b.value), (a, b), lambda g: (g, -_reduce_like(g, bc)))


def mul(a, b) -> Variable:
    a, b = constant(a), constant(b)
    bc = T.check_binary(a.value, b.value)
    av, bv = a.value, b.value
    bx = bv[:, None, None] if bc else bv

    def back(g):
        return g * bx, _reduce_like(g * av, bc)

    return _make(av * bx, (a, b), back)


def add_scalar(a, s: float) -> Variable:
    a = constant(a)
    return _make(T.add_scalar(a.value, s), (a,), lambda g: (g,))


def mul_scalar(a, s: float) -> Variable:
    a = constant(a)
    s = float(s)
    return _make(T.mul_scalar(a.value, s), (a,), lambda g: (g * s,))


def tanh(a) -> Variable:
    a = constant(a)
    y = T.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Variable:
    a = constant(a)
    y = T.sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Variable:
    a = constant(a)
    mask = a.value > 0
    return _make(T.relu(a.value), (a,), lambda g: (g * mask,))


def abs(a) -> Variable:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,))


def sum(a) -> Variable:  # noqa: A001
    a = constant(a)
    shape = a.shape
    return _make(np.array([a.value.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def weighted_sum(a, w: np.ndarray) -> Variable:
    """``sum(a * w)`` for a constant weight array ``w``."""
    a = constant(a)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weights {w.shape} do not match {a.shape}")
    return _make(np.array([np.sum(a.value * w)]), (a,), lambda g: (g[0] * w,))


def add_n(terms: Sequence[Variable]) -> Variable:
    terms = [constant(t) for t in terms]
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n shape mismatch {t.shape} vs {shape}")
    total = terms[0].value.copy()
    for t in terms[1:]:
        total += t.value
    return _make(total, tuple(terms), lambda g: tuple(g for _ in terms))


def reshape(a, shape) -> Variable:
    a = constant(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Variable:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


# --------------------------------------------------------------------------
# contractions and pooling
# --------------------------------------------------------------------------


def mode_n_product(t, m, mode: int) -> Variable:
    """Differentiable :func:`gtnet.tensor.mode_n_product`."""
    t, m = constant(t), constant(m)
    tv, mv = t.value, m.value
    out = T.mode_n_product(tv, mv, mode)

    def back(g):
        gt = T.mode_n_product(g, mv.T, mode)
        gm = T.unfold(g, mode) @ T.unfold(tv, mode).T
        return gt, gm

    return _make(out, (t, m), back)


def einsum(subscripts: str, *operands) -> Variable:
    """Differentiable ``numpy.einsum`` for explicit ``'ab,bc->ac'`` subscripts.

    Repeated indices inside a single operand are not supported.
    """
    ops = [constant(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError("einsum operand count does not match subscripts")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated index in operand subscript {s!r}")
    values = [o.value for o in ops]
    out = np.einsum(subscripts, *values, optimize=len(ops) > 2)

    def back(g):
        grads = []
        for i, sub_i in enumerate(in_subs):
            others = [s for j, s in enumerate(in_subs) if j != i]
            other_vals = [v for j, v in enumerate(values) if j != i]
            present = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in sub_i if c in present)
            expr = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(expr, g, *other_vals, optimize=len(other_vals) > 1)
            if kept != sub_i:
                # indices summed only within operand i: broadcast back
                shape = [values[i].shape[k] if c in present else 1 for k, c in enumerate(sub_i)]
                gi = np.broadcast_to(gi.reshape(shape), values[i].shape).copy()
            grads.append(gi)
        return grads

    return _make(np.asarray(out, dtype=np.float64), tuple(ops), back)


def global_max_pool(t) -> Variable:
    """Differentiable per-channel max; ties send the gradient to the first maximum."""
    t = constant(t)
    out = T.global_max_pool(t.value)
    idx = T.global_max_argmax(t.value)
    shape = t.shape

    def back(g):
        gt = np.zeros((shape[0], shape[1] * shape[2]))
        gt[np.arange(shape[0]), idx] = g
        return (gt.reshape(shape),)

    return _make(out, (t,), back)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def _rel(a: float, b: float) -> float:
    return float(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8))


def grad_check(
    f: Callable[[], Variable],
    params: Sequence[Variable],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_aware: bool = False,
    kink_tol: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads the current ``value`` of each
    parameter.  The error per entry is
    ``|a - n| / (|a| + |n| + 1e-8)``.  ``max_entries`` caps the number of
    checked entries per parameter (sampled with ``rng``) for large models.

    With ``kink_aware``, an entry whose forward and backward one-sided
    slopes disagree by more than ``kink_tol`` has a non-differentiable point
    (relu, max) inside the step; central differences are meaningless there,
    so the analytic value may instead match either one-sided slope.  Smooth
    entries with strong curvature can trip the kink test; they keep their
    central-difference error if that is smaller.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("non-finite value in the forward pass")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> float:
        val = f().value
        if not np.all(np.isfinite(val)):
            raise NumericError("non-finite value in a perturbed forward pass")
        return float(val.reshape(-1)[0])

    f0 = evaluate() if kink_aware else 0.0
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        original = p.value
        flat_idx = np.arange(original.size)
        if max_entries is not None and original.size > max_entries:
            flat_idx = rng.choice(original.size, size=max_entries, replace=False)
        try:
            for k in flat_idx:
                plus = original.copy()
                plus.flat[k] += eps
                p.value = plus
                f_plus = evaluate()
                minus = original.copy()
                minus.flat[k] -= eps
                p.value = minus
                f_minus = evaluate()
                ana = a.flat[k]
                err = _rel(ana, (f_plus - f_minus) / (2.0 * eps))
                if kink_aware:
                    fwd, bwd = (f_plus - f0) / eps, (f0 - f_minus) / eps
                    if _rel(fwd, bwd) > kink_tol:
                        err = min(err, _rel(ana, fwd), _rel(ana, bwd))
                worst = max(worst, err)
        finally:
            p.value = original
    return worst
