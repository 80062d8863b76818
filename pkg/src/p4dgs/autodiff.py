"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tape records operations in execution order; backward() walks the tape in
reverse exactly once, accumulating vector-Jacobian products. Training math is
kept in float64 throughout. Only the op set needed by the scene model, the
entropy model and the renderer is provided; broadcasting follows numpy rules
(trailing-dim alignment, size-1 expansion).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered operation record. Parents always precede children."""

    def __init__(self):
        self.nodes = []  # node i: (parent ids tuple, vjp closures tuple)

    def __enter__(self):
        _stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack.pop()
        return False

    def _record(self, parents, vjps):
        self.nodes.append((parents, vjps))
        return len(self.nodes) - 1


_stack: list[Tape] = []


def _active() -> Tape | None:
    return _stack[-1] if _stack else None


class Tensor:
    """Dense float64 array, optionally linked to a gradient tape node."""

    __slots__ = ("data", "tape", "nid", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.tape = None
        self.nid = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def _as_array(values):
    a = np.asarray(values, dtype=np.float64)
    return a


def tensor(values) -> Tensor:
    """Wrap values as a constant (untracked) tensor."""
    return Tensor(_as_array(values))


def parameter(values) -> Tensor:
    """Wrap values as a trainable leaf; rejects non-finite entries."""
    a = _as_array(values)
    if not np.all(np.isfinite(a)):
        raise ValueError("parameter contains NaN/Inf")
    return Tensor(a, requires_grad=True)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x))


def _enter(t: Tensor, tape: Tape):
    """Node id of t on the active tape; leaves are entered on demand."""
    if t.tape is tape and t.nid is not None:
        return t.nid
    if t.requires_grad:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("NaN/Inf tensor at tape entry")
        t.tape = tape
        t.nid = tape._record((), ())
        return t.nid
    return None


def _make(data, inputs, vjps) -> Tensor:
    """Build the output tensor, recording a node when any input is tracked."""
    tape = _active()
    out = Tensor(data)
    if tape is None:
        return out
    parents, fns = [], []
    for t, fn in zip(inputs, vjps):
        nid = _enter(t, tape)
        if nid is not None:
            parents.append(nid)
            fns.append(fn)
    if parents:
        out.tape = tape
        out.nid = tape._record(tuple(parents), tuple(fns))
    return out


def apply_custom(out_data, inputs, vjps) -> Tensor:
    """Register a fused operation with hand-written vector-Jacobian products."""
    return _make(out_data, inputs, vjps)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"shapes do not conform: {a.shape} vs {b.shape}") from None
    return _make(
        data,
        (a, b),
        (
            lambda g, a=a.data, b=b.data, s=a.shape: _unbroadcast(vjp_a(g, a, b), s),
            lambda g, a=a.data, b=b.data, s=b.shape: _unbroadcast(vjp_b(g, a, b), s),
        ),
    )


def add(a, b):
    return _binary(a, b, np.add, lambda g, a, b: g, lambda g, a, b: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b)
    )


def neg(a):
    a = _coerce(a)
    return _make(-a.data, (a,), (lambda g: -g,))


def matmul(a, b):
    """Matrix product; supports stacked (batched) operands, numpy semantics."""
    a, b = _coerce(a), _coerce(b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} vs {b.shape}") from None

    def vjp_a(g, ad=a.data, bd=b.data):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        return _unbroadcast(ga, ad.shape)

    def vjp_b(g, ad=a.data, bd=b.data):
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(gb, bd.shape)

    return _make(data, (a, b), (vjp_a, vjp_b))


def _unary(a, fwd, vjp):
    a = _coerce(a)
    data = fwd(a.data)
    return _make(data, (a,), (lambda g, x=a.data, y=data: vjp(g, x, y),))


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a):
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt of negative value")
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y)


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a):
    return _unary(a, _expit, lambda g, x, y: g * y * (1.0 - y))


def relu(a):
    # subgradient 0 at the kink
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0.0))


def sin(a):
    return _unary(a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda g, x, y: g * -np.sin(x))


def abs_(a):
    # subgradient 0 at 0
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def erf(a):
    c = 2.0 / np.sqrt(np.pi)
    return _unary(a, _erf, lambda g, x, y: g * c * np.exp(-x * x))


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda g, x, y: g * _expit(x))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is 0 outside the bounds."""
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)

    def vjp(g, x=a.data):
        m = np.ones_like(x)
        if lo is not None:
            m *= x >= lo
        if hi is not None:
            m *= x <= hi
        return g * m

    return _make(data, (a,), (vjp,))


def where(mask, a, b):
    """Select a where mask else b; mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _coerce(a), _coerce(b)
    data = np.where(mask, a.data, b.data)
    return _make(
        data,
        (a, b),
        (
            lambda g, s=a.shape: _unbroadcast(np.where(mask, g, 0.0), s),
            lambda g, s=b.shape: _unbroadcast(np.where(mask, 0.0, g), s),
        ),
    )


def maximum(a, b):
    # ties route the gradient to the first operand
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, a, b: g * (a >= b),
        lambda g, a, b: g * (b > a),
    )


def broadcast_to(a, shape):
    a = _coerce(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(data.copy(), (a,), (lambda g, s=a.shape: _unbroadcast(g, s),))


def reshape(a, shape):
    a = _coerce(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), (lambda g, s=a.shape: g.reshape(s),))


def transpose(a, axes):
    a = _coerce(a)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), (lambda g: np.transpose(g, inv),))


def slice_(a, key):
    """Basic slicing (view semantics on the forward value)."""
    a = _coerce(a)
    data = a.data[key]

    def vjp(g, shape=a.shape):
        z = np.zeros(shape)
        z[key] = g
        return z

    return _make(np.array(data), (a,), (vjp,))


def take(a, indices, axis=0):
    """Gather rows along axis 0; duplicate indices accumulate in the vjp."""
    if axis != 0:
        raise NotImplementedError("take supports axis 0 only")
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def vjp(g, shape=a.shape):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _make(data, (a,), (vjp,))


def concat(tensors, axis=0):
    ts = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [np.s_[:]] * data.ndim
        sl[axis] = np.s_[offsets[i] : offsets[i + 1]]
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(data, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=a.shape):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.asarray(data, dtype=np.float64), (a,), (vjp,))


def mean_(a, axis=None, keepdims=False):
    a = _coerce(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def backward(root: Tensor):
    """Gradients of a scalar root w.r.t. every tracked tensor on its tape.

    Visits nodes exactly once in reverse topological order; unreachable
    leaves read back as zeros.
    """
    if root.tape is None or root.nid is None:
        raise ValueError("root is not on a tape")
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    grads: list = [None] * (root.nid + 1)
    grads[root.nid] = np.ones_like(root.data)
    for nid in range(root.nid, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        parents, vjps = tape.nodes[nid]
        for pid, vjp in zip(parents, vjps):
            contrib = vjp(g)
            if grads[pid] is None:
                grads[pid] = contrib
            else:
                grads[pid] = grads[pid] + contrib
    return Gradients(tape, grads)


class Gradients:
    """Result of backward(); indexable by the tensors that were on the tape."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def of(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.nid is None:
            raise KeyError("tensor was not recorded on this tape")
        if t.nid < len(self._grads) and self._grads[t.nid] is not None:
            return self._grads[t.nid]
        return np.zeros(t.shape)
