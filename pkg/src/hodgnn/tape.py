"""Reverse-mode gradient tape over numpy primitives.

Every primitive below accepts a mix of plain arrays and tape-tracked ``Var``
values. With no ``Var`` among the inputs it evaluates eagerly and returns an
ndarray; otherwise it records a vector-Jacobian closure on the owning tape.
The engine is written against these primitives once and runs in both modes.

Replaying the tape backward visits operations in exact reverse recording
order; a tape supports one backward pass, after which its intermediates are
freed.
"""
from __future__ import annotations

import numpy as np

from .activations import ActivationKind, act_nth

__all__ = ["GradTape", "Var", "TapeError", "value_of", "add", "mul", "neg",
           "linear", "gather_rows", "scatter_rows", "segment_sum", "concat_rows",
           "concat_cols", "sum_rows", "sum_all", "reshape", "act", "log", "absval"]


class TapeError(RuntimeError):
    pass


class Var:
    """A tape-tracked array value."""

    __slots__ = ("value", "tape")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape: "GradTape"):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TapeError("division by a tracked value is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)


class GradTape:
    """Recorded primitive operations with saved closures for VJPs."""

    def __init__(self):
        self._ops: list = []
        self._leaves: list = []
        self._consumed = False

    def leaf(self, value, name: str) -> Var:
        var = Var(value, self)
        self._leaves.append((name, var))
        return var

    def watch(self, value) -> Var:
        """Track an input without naming it (no gradient is reported for it)."""
        return Var(value, self)

    def record(self, out: Var, pairs) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward")
        self._ops.append((out, tuple(pairs)))

    def backward(self, out: Var, seed) -> dict:
        """Accumulate d(seed . out)/d(leaf) for every named leaf.

        Returns {leaf name: gradient array}; frees intermediates afterwards.
        """
        if self._consumed:
            raise TapeError("double backward on the same tape")
        if not isinstance(out, Var) or out.tape is not self:
            raise TapeError("output does not belong to this tape (incomplete tape)")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise TapeError(f"seed shape {seed.shape} != output shape {out.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node_out, pairs in reversed(self._ops):
            g = grads.pop(id(node_out), None)
            if g is None:
                continue
            for var, vjp in pairs:
                contrib = vjp(g)
                prev = grads.get(id(var))
                grads[id(var)] = contrib if prev is None else prev + contrib
        result = {}
        for name, var in self._leaves:
            if name in result:
                raise TapeError(f"leaf {name!r} registered twice")
            result[name] = grads.get(id(var), np.zeros_like(var.value))
        self._ops.clear()
        return result


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> GradTape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise TapeError("mixing values from different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to the given input shape after broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return value_of(a) + value_of(b)
    av, bv = np.asarray(value_of(a), dtype=np.float64), np.asarray(value_of(b), dtype=np.float64)
    out = Var(av + bv, tape)
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(g, bv.shape)))
    tape.record(out, pairs)
    return out


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(value_of(a))
    out = Var(-a.value, a.tape)
    a.tape.record(out, [(a, lambda g: -g)])
    return out


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return value_of(a) * value_of(b)
    av, bv = np.asarray(value_of(a), dtype=np.float64), np.asarray(value_of(b), dtype=np.float64)
    out = Var(av * bv, tape)
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    tape.record(out, pairs)
    return out


def linear(x, w):
    """x @ w.T for x of shape (rows, q) or (q,) and weight w of shape (p, q)."""
    tape = _tape_of(x, w)
    xv, wv = value_of(x), value_of(w)
    if tape is None:
        return xv @ wv.T
    out = Var(xv @ wv.T, tape)
    pairs = []
    if isinstance(x, Var):
        pairs.append((x, lambda g: g @ wv))
    if isinstance(w, Var):
        if xv.ndim == 1:
            pairs.append((w, lambda g: np.outer(g, xv)))
        else:
            pairs.append((w, lambda g: g.T @ xv))
    tape.record(out, pairs)
    return out


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if not isinstance(a, Var):
        return a[idx]

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, g)
        return z

    out = Var(a.value[idx], a.tape)
    a.tape.record(out, [(a, vjp)])
    return out


def scatter_rows(a, idx, num_rows: int):
    """Place row block a at unique row positions idx of a zero (num_rows, w) matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    av = value_of(a)
    z = np.zeros((num_rows,) + av.shape[1:], dtype=np.float64)
    if not isinstance(a, Var):
        z[idx] = av
        return z
    z[idx] = av
    out = Var(z, a.tape)
    a.tape.record(out, [(a, lambda g: g[idx])])
    return out


def segment_sum(a, seg, num_segments: int):
    """Sum rows of a into num_segments buckets given by seg (additive merge)."""
    seg = np.asarray(seg, dtype=np.int64)
    av = value_of(a)
    z = np.zeros((num_segments,) + av.shape[1:], dtype=np.float64)
    np.add.at(z, seg, av)
    if not isinstance(a, Var):
        return z
    out = Var(z, a.tape)
    a.tape.record(out, [(a, lambda g: g[seg])])
    return out


def concat_rows(parts):
    return _concat(parts, axis=0)


def concat_cols(parts):
    return _concat(parts, axis=1)


def _concat(parts, axis):
    tape = _tape_of(*parts)
    vals = [np.asarray(value_of(p), dtype=np.float64) for p in parts]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = Var(np.concatenate(vals, axis=axis), tape)
    pairs = []
    offset = 0
    for p, v in zip(parts, vals):
        size = v.shape[axis]
        if isinstance(p, Var):
            lo = offset

            def vjp(g, lo=lo, size=size):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, lo + size)
                return g[tuple(sl)]

            pairs.append((p, vjp))
        offset += size
    tape.record(out, pairs)
    return out


def sum_rows(a):
    """Sum over axis 0 (node pooling)."""
    if not isinstance(a, Var):
        return np.asarray(a).sum(axis=0)
    n = a.value.shape[0]
    out = Var(a.value.sum(axis=0), a.tape)
    a.tape.record(out, [(a, lambda g: np.broadcast_to(g, (n,) + g.shape).copy())])
    return out


def sum_all(a):
    if not isinstance(a, Var):
        return np.asarray(a).sum()
    out = Var(np.asarray(a.value.sum()), a.tape)
    a.tape.record(out, [(a, lambda g: np.broadcast_to(g, a.value.shape).copy())])
    return out


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.asarray(a).reshape(shape)
    old = a.value.shape
    out = Var(a.value.reshape(shape), a.tape)
    a.tape.record(out, [(a, lambda g: g.reshape(old))])
    return out


def act(kind: ActivationKind, j: int, x):
    """Apply the j-th activation derivative elementwise (j = 0 is the value).

    Differentiating an order-j activation evaluation bumps the order by one,
    so the tape consumes derivative tables one order beyond the engine's cap.
    """
    if not isinstance(x, Var):
        return act_nth(kind, j, x)
    xv = x.value
    out = Var(act_nth(kind, j, xv), x.tape)
    x.tape.record(out, [(x, lambda g: g * act_nth(kind, j + 1, xv))])
    return out


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    out = Var(np.log(x.value), x.tape)
    x.tape.record(out, [(x, lambda g: g / x.value)])
    return out


def absval(x):
    if not isinstance(x, Var):
        return np.abs(x)
    sign = np.sign(x.value)
    out = Var(np.abs(x.value), x.tape)
    x.tape.record(out, [(x, lambda g: g * sign)])
    return out
