"""
Small dense-tensor library with tape-based reverse-mode differentiation.

Values are float64 numpy arrays. Every differentiable operation returns a new
:class:`Tensor` holding references to its inputs and a closure mapping the
output gradient to input gradients. When a :class:`Tape` is active, each such
output is appended to it in creation order, which is a valid topological order
for the reverse sweep.

Only what the embedding model needs is provided: elementwise arithmetic with
numpy broadcasting, (batched) matrix products, tanh/sigmoid/hinge, sums,
indexing, concatenation, masked softmax and row normalization.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, InvalidMaskError

_ids = itertools.count()
_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float64)


@contextmanager
def extended_precision(enabled=True):
    """Build new tensors in ``np.longdouble`` inside the block."""
    prev = default_dtype()
    _state.dtype = np.longdouble if enabled else prev
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager; tapes nest per thread and the innermost one
    receives new nodes.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def record(self, node):
        self.nodes.append(node)
        self._ids.add(node.node_id)

    def __contains__(self, node):
        return node.node_id in self._ids

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __array_priority__ = 100.0
    __slots__ = ("value", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.node_id = next(_ids)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return self._backward is None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self):
        return swap_last(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn):
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.value = np.asarray(value, dtype=default_dtype())
    out.requires_grad = False
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out._parents = ()
    out._backward = None
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        stack = _tape_stack()
        if stack:
            stack[-1].record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    out = a.value / b.value

    def back(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _node(out, (a, b), back)


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


# linear algebra

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast.

    The common cases are ``(m, k) @ (k, n)``, ``(B, m, k) @ (k, n)`` (shared
    weight applied to a batch) and ``(B, m, k) @ (B, k, n)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # shared weight: fold the batch axes into rows
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), back)


def swap_last(a):
    a = as_tensor(a)
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), back)


# nonlinearities

def tanh_ew(a):
    """Elementwise tanh."""
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def hinge(a):
    """``max(0, a)``. The subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    active = a.value > 0
    return _node(np.where(active, a.value, 0.0), (a,), lambda g: (g * active,))


# structural

def getitem(a, index):
    a = as_tensor(a)
    out = a.value[index]

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), back)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, parts, back)


def concat_rows(parts):
    """Lay 1xH row vectors side by side into a 1x(len*H) row."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    width = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != 1 or p.shape[1] != width:
            raise DimensionError(
                f"concat_rows expects 1x{width} parts, got {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=1)


def stack(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.stack([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot stack shapes {[p.shape for p in parts]}: {exc}") from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _node(out, parts, back)


# normalizations

def masked_softmax(scores, mask, axis=-1):
    """Softmax over the positions where ``mask`` is true.

    Masked positions are excluded from the normalizer rather than pushed to a
    large negative score, so they get exactly zero weight and zero gradient.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=axis).all():
        raise InvalidMaskError("masked_softmax: a row has no valid position")
    s = np.where(mask, scores.value, -np.inf)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (scores,), back)


def l2_normalize(a, axis=-1):
    """Scale vectors along ``axis`` to unit length.

    Zero vectors map to zero with zero gradient, so cosine similarity against a
    dead representation is 0 instead of NaN.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, a.value / safe, 0.0)

    def back(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > 0, (g - out * radial) / safe, 0.0),)

    return _node(out, (a,), back)


# reverse sweep

def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return [n for n in order if not n.is_leaf]


def backward(loss, tape=None):
    """Propagate d(loss)/d(x) into ``x.grad`` for every reachable tensor.

    Leaf gradients accumulate (``+=``) so several losses can be summed by
    calling this repeatedly; interior gradients are reset on each call. With a
    tape the recorded order is replayed in reverse; without one the graph is
    sorted from ``loss``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + 1.0
        return
    if tape is not None:
        if loss not in tape:
            raise ContractError("loss was not recorded on the given tape")
        order = [n for n in tape.nodes if n.node_id <= loss.node_id]
    else:
        order = _topological(loss)
    for n in order:
        n.grad = np.zeros_like(n.value)
    loss.grad = np.ones_like(loss.value)
    for n in reversed(order):
        if not n.grad.any():
            continue
        grads = n._backward(n.grad)
        for p, g in zip(n._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            p.grad += g


# finite differences

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probe: int
    probes: list = field(default_factory=list)  # (name, flat index, analytic, numeric, rel error)

    def passed(self, tol=1e-4):
        return self.max_rel_error <= tol


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _named_params(params):
    if hasattr(params, "named"):
        return list(params.named())
    if isinstance(params, dict):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def finite_diff_check(f, params, n_probe, h=1e-5, rng=None, extended=True):
    """Compare tape gradients of ``f(params)`` with central differences.

    ``n_probe`` scalar coordinates are drawn uniformly (with replacement) from
    all parameter entries. With ``extended`` the difference quotients are
    evaluated in ``np.longdouble``: in float64 the rounding noise of ``f``
    divided by ``2h`` (~1e-11 for h=1e-5) swamps gradients near 1e-8.
    """
    if n_probe < 1:
        raise ContractError("n_probe must be >= 1")
    rng = np.random.default_rng(rng)
    named = _named_params(params)
    for _, p in named:
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)
    analytic = {name: p.grad.copy() for name, p in named}

    sizes = np.array([p.size for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    report = GradCheckReport(0.0, n_probe)
    saved = [p.value for _, p in named]
    dtype = np.longdouble if extended else np.float64
    try:
        with no_grad(), extended_precision(extended):
            for _, p in named:
                p.value = p.value.astype(dtype)
            for flat in rng.integers(0, offsets[-1], size=n_probe):
                j = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, p = named[j]
                idx = int(flat - offsets[j])
                view = p.value.reshape(-1)
                orig = view[idx]
                view[idx] = orig + dtype(h)
                up = f(params).value
                view[idx] = orig - dtype(h)
                down = f(params).value
                view[idx] = orig
                num = float((up - down).reshape(-1)[0] / dtype(2 * h))
                ana = float(analytic[name].reshape(-1)[idx])
                err = relative_error(ana, num)
                report.probes.append((name, idx, ana, num, err))
                report.max_rel_error = max(report.max_rel_error, err)
    finally:
        for (_, p), value in zip(named, saved):
            p.value = value
    return report
