"""Minimal reverse-mode differentiation over dense numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the recorded graph in reverse topological order.

Everything is float64. Broadcasting follows numpy; gradients of broadcast
operands are summed back to the operand shape.
"""
import numpy as np

from . import diagnostics

LOG_EPS = 1e-12

_debug = False


class ShapeError(ValueError):
    """Operand shapes incompatible for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def set_debug(flag):
    """Check every op result for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op=None):
        arr = np.asarray(data, dtype=np.float64)
        if op is None:
            if not np.all(np.isfinite(arr)):
                raise ValueError("Tensor values must be finite")
        elif _debug and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite output from {op}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

    __array_priority__ = 100

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), back, "div")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def absdiff(a, b):
    """``|a - b|`` elementwise, with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("absdiff", a, b)
    d = a.data - b.data
    s = np.sign(d)
    return _make(np.abs(d), (a, b),
                 lambda g: (_unbroadcast(g * s, a.shape), _unbroadcast(-g * s, b.shape)),
                 "absdiff")


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    k = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def log(a):
    """Natural log; inputs below ``LOG_EPS`` are clamped (zero gradient there)."""
    a = as_tensor(a)
    low = a.data < LOG_EPS
    if low.any():
        diagnostics.warn("log_clamped", "log input clamped to 1e-12", int(low.sum()))
    x = np.where(low, LOG_EPS, a.data)
    return _make(np.log(x), (a,), lambda g: (np.where(low, 0.0, g / x),), "log")


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- structural

def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` is 1-D, 2-D or batched N-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb
    return _make(out, (a, b), back, "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(tensors), back, "concat")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index):
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    out = a.data[index]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)
    return _make(np.array(out, dtype=np.float64), (a,), back, "take")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _make(out, (a,), back, "softmax")


def dropout(a, rate, rng=None, training=False):
    """Inverted dropout; identity unless ``training``."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def grad_reverse(a, scale=1.0):
    """Identity forward; multiplies the upstream gradient by ``-scale``."""
    a = as_tensor(a)
    c = float(scale)
    return _make(a.data.copy(), (a,), lambda g: (-c * g,), "grad_reverse")


_OPS = {
    "matmul": matmul, "add": add, "mul": mul, "scale": scale, "concat": concat,
    "absdiff": absdiff, "sigmoid": sigmoid, "leaky_relu": leaky_relu,
    "softmax": softmax, "log": log, "sum": tsum, "mean": mean, "dropout": dropout,
    "grad_reverse": grad_reverse, "sub": sub, "div": div, "pow": power,
    "reshape": reshape, "take": take, "clip": clip,
}


def tape_forward(op_name, inputs, **kwargs):
    """Apply a named op. ``concat`` takes the whole input list; others unpack it."""
    try:
        fn = _OPS[op_name]
    except KeyError:
        raise ValueError(f"unknown op {op_name!r}") from None
    if op_name == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate into existing ``.grad`` arrays, so call
    ``zero_grad`` (or let the optimizer clear them) between steps.
    Intermediate results get the gradient of this pass only.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
