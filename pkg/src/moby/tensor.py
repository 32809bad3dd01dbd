"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a closure that maps the gradient of
its output to gradients of its inputs.  ``backward`` orders the recorded
graph topologically, walks it in reverse and accumulates gradients.  The
graph is released after the walk, so each training step builds a fresh one.

Broadcasting is one-sided: for a binary op the smaller operand, aligned on
trailing axes, may only have extents equal to the larger operand's or 1.
"""
import contextlib
import threading

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, NumericalError, ShapeError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return detach(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# broadcasting

def _broadcast_shape(a_shape, b_shape, op):
    if a_shape == b_shape:
        return a_shape
    for big, small in ((a_shape, b_shape), (b_shape, a_shape)):
        if len(small) <= len(big) and all(s in (1, t) for s, t in zip(small[::-1], big[::-1])):
            return big
    raise ShapeError(f"{op}: cannot broadcast shapes {a_shape} and {b_shape}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _broadcast_shape(a.shape, b.shape, "add")
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _record(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _broadcast_shape(a.shape, b.shape, "sub")
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        return _unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)

    return _record(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b):
    a = _wrap(a)
    b = _wrap(b, like=a)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward_fn, "mul")


def scale(x, factor):
    factor = float(factor)
    return _record(x.data * x.data.dtype.type(factor), (x,), lambda g: (g * factor,), "scale")


def neg(x):
    return _record(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x):
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, (x,), backward_fn, "gelu")


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight) or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, got {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, got {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward_fn, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward_fn, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _record(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward_fn, "mean")


# --------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def roll(x, shift, axis):
    """Cyclic shift, same semantics as ``np.roll``."""
    if isinstance(shift, int):
        shift = (shift,)
        axis = (axis,)
    back = tuple(-s for s in shift)
    return _record(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, back, axis),), "roll")


def slice_(x, index):
    """Basic (non-fancy) indexing."""
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record(x.data[index], (x,), backward_fn, "slice")


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward_fn, "concat")


def gather(table, index):
    """Row lookup ``table[index]`` along axis 0 (embedding-style)."""
    index = np.asarray(index)
    shape, dtype = table.shape, table.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(table.data[index], (table,), backward_fn, "gather")


def detach(x):
    """Share data with ``x`` but never carry gradient back to it."""
    out = Tensor(x.data)
    out.op = "detach"
    return out


# --------------------------------------------------------------------------
# normalisation, softmax and losses

def _check_finite(x, op):
    if not np.all(np.isfinite(x.data)):
        origin = first_nonfinite_op(x) if x.requires_grad else None
        origin = origin or op
        raise NumericalError(f"{op}: non-finite input (first produced by {origin})", op=origin)


def softmax(x, axis=-1):
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward_fn, "softmax")


def log_softmax(x, axis=-1):
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward_fn, "log_softmax")


def cross_entropy(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c})")
    _check_finite(logits, "cross_entropy")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def backward_fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "cross_entropy")


def _check_eps(eps):
    if not eps > 0:
        raise ConfigError(f"normalisation eps must be positive, got {eps}")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    _check_eps(eps)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        gx = gg = gb = None
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward_fn, "layer_norm")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional); otherwise the
    running buffers are used.
    """
    _check_eps(eps)
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    if training:
        if count < 2:
            raise ContractError("batch_norm: need more than one value per channel in training mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)

    def backward_fn(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            gh = g * gamma.data
            if training:
                gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
            else:
                gx = gh * inv
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward_fn, "batch_norm")


def l2_normalize(x, eps=1e-12):
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward_fn(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        inside = norm > eps
        return (np.where(inside, (g - out * radial) / denom, g / denom),)

    return _record(out, (x,), backward_fn, "l2_normalize")


# --------------------------------------------------------------------------
# graph traversal

def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


def first_nonfinite_op(root):
    """Name of the earliest recorded op whose output is non-finite, or None."""
    for node in _topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None
