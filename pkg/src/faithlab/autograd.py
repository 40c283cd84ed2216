"""Small reverse-mode automatic differentiation engine on top of numpy.

A :class:`Tensor` wraps an ``ndarray`` together with an optional gradient
buffer and the operation that produced it.  Gradients are obtained with
:func:`backward`, which replays a :class:`ComputationTape` built from the
root's lineage in reverse topological order.

Only first-order gradients are supported.  By default the engine is strict:
calling ``backward`` twice on the same graph, or into leaves whose gradient
was not reset, raises :class:`GradientError`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "NumericError",
    "GradientError",
    "tensor",
    "forward_op",
    "backward",
    "finite_diff_check",
    "no_grad",
    "precision",
    "strict_numerics",
    "get_default_dtype",
    "set_default_dtype",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


class NumericError(FloatingPointError):
    """Raised on non-finite values when strict numerics are enabled."""


class GradientError(RuntimeError):
    """Raised for invalid backward-pass usage."""


_state = threading.local()
_DTYPES = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}
_default_dtype = np.float32


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def _strict_numerics():
    return getattr(_state, "strict_numerics", False)


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(_DTYPES.get(dtype, dtype)).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``"float32"``/``"float64"``)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording on the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def strict_numerics(enabled=True):
    """Raise :class:`NumericError` whenever an op receives non-finite input."""
    previous = _strict_numerics()
    _state.strict_numerics = enabled
    try:
        yield
    finally:
        _state.strict_numerics = previous


class Tensor:
    """Dense array with an optional gradient and computation-graph lineage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        from_python = not isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_DTYPES.get(dtype, dtype), copy=False)
        elif from_python or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        """Flat view of the underlying values."""
        return self.data.reshape(-1)

    @property
    def has_lineage(self):
        return self.op is not None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        lineage = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{lineage})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_over_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_over_axis(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _check_finite(op, inputs):
    if _strict_numerics():
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"{op}: non-finite input")


def _make(op, data, inputs, backward_fn):
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(inputs)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------
def add(a, b):
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    _check_finite("add", (a, b))

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def neg(a):
    def bw(g):
        return (-g,)

    return _make("neg", -a.data, (a,), bw)


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a.dtype)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", (a, b))

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def pow_(a, exponent):
    _check_finite("pow", (a,))
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make("pow", out, (a,), bw)


def exp(a):
    _check_finite("exp", (a,))
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a):
    _check_finite("log", (a,))
    with np.errstate(divide="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", out, (a,), bw)


def softplus(a):
    """``log(1 + exp(a))`` computed without overflow."""
    _check_finite("softplus", (a,))
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bw(g):
        return (g * _sigmoid(x),)

    return _make("softplus", out, (a,), bw)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    _check_finite("gelu", (a,))
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), bw)


# -- linear algebra ------------------------------------------------------
def _swap_last(x):
    return np.swapaxes(x, -1, -2) if x.ndim >= 2 else x


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    _check_finite("matmul", (a, b))

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch dims into one contraction instead of summing per-batch products
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def embedding_lookup(weight, ids):
    """Rows of ``weight`` (V, d) selected by the integer array ``ids``."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    if weight.ndim != 2:
        raise ShapeError("embedding_lookup", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {weight.shape[0]}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding_lookup", weight.data[ids], (weight,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    _check_finite("layer_norm", (x, gamma, beta))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            n = x.shape[-1]
            gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), bw)


def softmax(a, axis=-1):
    _check_finite("softmax", (a,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis=-1):
    _check_finite("log_softmax", (a,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


# -- shape manipulation --------------------------------------------------
def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), bw)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (a,), bw)


def slice_(a, index):
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, (str(index),)) from exc

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make("slice", np.array(out, copy=True), (a,), bw)


def sum_over_axis(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum_over_axis", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_over_axis(a, axis, keepdims), 1.0 / float(n))


def max_over_axis(a, axis=None, keepdims=False):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def bw(g):
            ga = np.zeros(a.size, dtype=a.dtype)
            ga[idx] = g
            return (ga.reshape(a.shape),)

        return _make("max_over_axis", np.asarray(out), (a,), bw)

    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _make("max_over_axis", out, (a,), bw)


OP_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "embedding_lookup": embedding_lookup,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "max_over_axis": max_over_axis,
    "sum_over_axis": sum_over_axis,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "neg": neg,
    "pow": pow_,
}


def forward_op(op_kind, inputs, **kwargs):
    """Apply ``op_kind`` to ``inputs``; non-tensor operands go through ``kwargs``."""
    try:
        fn = OP_KINDS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ------------------------------------------------------------
class ComputationTape:
    """Operations reachable from a root, in topological order."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self.visits = 0

    @classmethod
    def from_root(cls, root):
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
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    @property
    def operations(self):
        return [n for n in self.nodes if n.op is not None]

    def leaves(self):
        return [n for n in self.nodes if n.op is None]

    def replay(self, root, accumulate=False):
        """Propagate gradients from ``root`` (seeded with 1) to every node."""
        if not accumulate:
            for leaf in self.leaves():
                if leaf.grad is not None:
                    raise GradientError("leaf gradient not reset before backward (strict mode)")
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node.op is None:
                continue
            self.visits += 1
            parent_grads = node._backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        return self.visits

    def clear(self):
        for n in self.nodes:
            n.op = None
            n.parents = ()
            n._backward = None
        self.nodes = []


def backward(root, strict=True):
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``root``.

    ``strict=False`` accumulates into existing leaf gradients instead of
    raising.  Returns the tape that was replayed.
    """
    if root.size != 1:
        raise GradientError(f"backward requires a scalar root, got shape {root.shape}")
    if root.op is None:
        raise GradientError("backward: root has no lineage")
    if strict and root._consumed:
        raise GradientError("backward called twice on the same graph (strict mode)")
    tape = ComputationTape.from_root(root)
    tape.replay(root, accumulate=not strict)
    root._consumed = True
    return tape


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences, ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if x.dtype != np.float64:
        raise ValueError("finite_diff_check requires float64 tensors")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y = f(leaf)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("finite_diff_check: f(x) is not finite")
    if y.op is None:
        analytic = np.zeros_like(leaf.data)
    else:
        backward(y)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(Tensor(base.copy())).data.sum())
            flat[i] = orig - epsilon
            fm = float(f(Tensor(base.copy())).data.sum())
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * epsilon)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def stack_values(tensors: Sequence[Tensor]) -> np.ndarray:
    return np.stack([t.data for t in tensors])
