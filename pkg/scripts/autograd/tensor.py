"""
Dense double-precision tensors with reverse-mode differentiation.

Every value is float64. Images, feature maps and score maps use the
height x width x channels layout.

Bilinear resampling follows the half-pixel-centers convention:

    src = (dst + 0.5) * in_size / out_size - 0.5, clamped to [0, in_size - 1]

The same convention is used for coordinate correspondence between views, so
any code that maps pixel positions through a rescale must go through
`interp_indices`.

Broadcasting is limited to the case where one operand's shape equals the
result shape (the other is right-aligned and may only contribute size-1 or
missing leading dimensions). Anything else raises ShapeError.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scripts.errors import GraphError, NumericError, ShapeError

logger = logging.getLogger("TensorCore")

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run operations without building a differentiation graph (this thread only)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple
    output: "Tensor"


class Tape:
    """Ordered record of the operations executed during one training step.

    Entries are appended in execution order while the tape is the innermost
    active tape of the current thread. A tape belongs to one step: clear it
    (or open a fresh one) before the next.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output):
        self.entries.append(TapeEntry(op, tuple(inputs), output))

    def clear(self):
        self.entries.clear()

    def ops(self):
        return [entry.op for entry in self.entries]

    def consumers(self, tensor):
        """Entries that read `tensor` as one of their inputs."""
        return [entry for entry in self.entries if any(t is tensor for t in entry.inputs)]

    def backward(self, root):
        backward(root)


def _check_finite(values, op):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Immutable float64 array with an optional gradient slot.

    `data` is read-only; parameters are updated through `assign_`.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        values = np.array(data, dtype=np.float64)
        _check_finite(values, "Tensor")
        self._init(values, requires_grad, name)

    @classmethod
    def _wrap(cls, values, requires_grad=False, name=None):
        tensor = cls.__new__(cls)
        tensor._init(np.asarray(values, dtype=np.float64), requires_grad, name)
        return tensor

    def _init(self, values, requires_grad, name):
        values.setflags(write=False)
        self.data = values
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # --- inspection ---
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
    def values(self):
        return self.data

    @property
    def op(self):
        return self._op

    @property
    def parents(self):
        return self._parents

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def __len__(self):
        return self.shape[0]

    # --- parameter updates ---
    def assign_(self, values):
        """Replace the values of a leaf parameter (optimizer updates only)."""
        values = np.array(values, dtype=np.float64)
        if values.shape != self.shape:
            raise ShapeError(f"cannot assign {values.shape} into {self.shape}")
        _check_finite(values, "assign_")
        values.setflags(write=False)
        self.data = values

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)

    # --- arithmetic ---
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # --- shorthand ---
    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def relu(self):
        return elementwise("relu", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def abs(self):
        return elementwise("abs", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def softplus(self):
        return elementwise("softplus", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def ones_like(tensor):
    return Tensor(np.ones(tensor.shape))


def _record(op, inputs, values, backward_fn):
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values, op)
    out = Tensor._wrap(values)
    out._op = op
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = backward_fn
    stack = _tape_stack()
    if stack:
        stack[-1].record(op, inputs, out)
    return out


# --- graph traversal ---

def _topological_order(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        key = id(node)
        if finished:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and state.get(id(parent)) != 2:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(t) into `t.grad` for every tensor that requires grad.

    Gradients add onto whatever `grad` already holds; call `zero_grad` on the
    parameters (or the optimizer) between steps.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological_order(root)
    pending = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad.copy() if node.grad is None else node.grad + grad
        if node._backward is None:
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise GraphError(f"{node._op} returned grad {parent_grad.shape} for input {parent.shape}")
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def detach(tensor):
    """Same values, cut from the graph."""
    out = Tensor._wrap(tensor.data)
    out._op = "detach"
    stack = _tape_stack()
    if stack:
        stack[-1].record("detach", (tensor,), out)
    return out


# --- elementwise ---

def _broadcast_shape(a, b, op):
    if a.shape == b.shape:
        return a.shape
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"{op}: only trailing-dimension broadcasting is supported, got {a.shape} and {b.shape}")
    return shape


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


_UNARY = {
    "neg": (np.negative, lambda g, x, out: -g),
    "exp": (np.exp, lambda g, x, out: g * out),
    "log": (np.log, lambda g, x, out: g / x),
    "relu": (lambda x: np.maximum(x, 0.0), lambda g, x, out: g * (x > 0)),
    "abs": (np.abs, lambda g, x, out: g * np.sign(x)),
    "square": (np.square, lambda g, x, out: 2.0 * g * x),
    "sigmoid": (_sigmoid, lambda g, x, out: g * out * (1.0 - out)),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda g, x, out: g * _sigmoid(x)),
}

_BINARY = {
    "add": (np.add, lambda g, x, y, out: (g, g)),
    "sub": (np.subtract, lambda g, x, y, out: (g, -g)),
    "mul": (np.multiply, lambda g, x, y, out: (g * y, g * x)),
    "div": (np.divide, lambda g, x, y, out: (g / y, -g * out / y)),
}


def elementwise(kind, a, b=None):
    """Apply a named elementwise operation (unary kinds ignore `b`)."""
    a = as_tensor(a)
    if kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{kind} takes a single operand")
        forward, rule = _UNARY[kind]
        x = a.data
        with np.errstate(all="ignore"):
            out = forward(x)
        return _record(kind, (a,), out, lambda g: (rule(g, x, out),))
    if kind in _BINARY:
        b = as_tensor(b)
        _broadcast_shape(a, b, kind)
        forward, rule = _BINARY[kind]
        x, y = a.data, b.data
        with np.errstate(all="ignore"):
            out = forward(x, y)

        def backward_fn(g):
            ga, gb = rule(g, x, y, out)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _record(kind, (a, b), out, backward_fn)
    raise ValueError(f"unknown elementwise op {kind!r}")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    x = a.data
    with np.errstate(all="ignore"):
        out = x ** exponent
    return _record("pow", (a,), out, lambda g: (g * exponent * x ** (exponent - 1.0),))


# --- reductions ---

def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
        normalized.append(int(axis) % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(normalized))


def reduce(kind, a, axes=None, keepdims=False):
    """sum / mean / max over `axes` (all axes when None)."""
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    if any(a.shape[axis] == 0 for axis in axes) or (a.size == 0):
        raise ShapeError(f"{kind} over an empty axis of shape {a.shape}")
    x = a.data
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        out = x.mean(axis=axes, keepdims=keepdims)
    elif kind == "max":
        out = x.max(axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    count = int(np.prod([a.shape[axis] for axis in axes])) if axes else 1

    def backward_fn(g):
        g_keep = g if keepdims else np.expand_dims(g, axes)
        if kind == "sum":
            return (np.broadcast_to(g_keep, a.shape).copy(),)
        if kind == "mean":
            return (np.broadcast_to(g_keep / count, a.shape).copy(),)
        peak = out if keepdims else np.expand_dims(out, axes)
        mask = (x == peak).astype(np.float64)
        return (mask * g_keep / mask.sum(axis=axes, keepdims=True),)

    return _record(kind, (a,), out, backward_fn)


# --- linear algebra and layout ---

def matmul(a, b):
    """Matrix product; 1-d operands are promoted and squeezed like numpy.

    A 2-d right operand is shared across the leading dimensions of the left one.
    """
    a, b = as_tensor(a), as_tensor(b)
    x = a.data[None, :] if a.ndim == 1 else a.data
    y = b.data[:, None] if b.ndim == 1 else b.data
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if y.ndim > 2 and x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if x.ndim < y.ndim:
        raise ShapeError(f"matmul: right operand has more batch dims, {a.shape} @ {b.shape}")
    full = x @ y

    def backward_fn(g):
        g = g.reshape(full.shape)
        gx = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.swapaxes(x, -1, -2) @ g
        return gx.reshape(a.shape), gy.reshape(b.shape)

    out = full
    if a.ndim == 1:
        out = out.reshape(out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = out[..., 0]
    return _record("matmul", (a, b), out, backward_fn)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def flip(a, axis):
    a = as_tensor(a)
    return _record("flip", (a,), np.flip(a.data, axis=axis).copy(), lambda g: (np.flip(g, axis=axis).copy(),))


def getitem(a, index):
    a = as_tensor(a)
    out = np.array(a.data[index])

    def backward_fn(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _record("getitem", (a,), out, backward_fn)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, sizes, axis=axis)))


# --- normalizations ---

def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = as_tensor(a)
    out = _softmax(a.data, axis)
    return _record(
        "softmax", (a,), out,
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _record(
        "log_softmax", (a,), out,
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


def l2_normalize(a, axis=-1):
    """Unit vectors along `axis`; all-zero vectors map to zero with zero gradient."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    out = np.where(nonzero, x / safe, 0.0)

    def backward_fn(g):
        grad = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(nonzero, grad, 0.0),)

    return _record("l2_normalize", (a,), out, backward_fn)


# --- spatial ops ---

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded cross-correlation of an HxWxCin map with a kh x kw x Cin x Cout kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[2] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    kh, kw, _, cout = weight.shape
    height, width = x.shape[:2]
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[:2]}")
    windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    w = weight.data
    out = np.einsum("hwcij,ijco->hwo", windows, w, optimize=True)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.data
        inputs = (x, weight, bias)
    out_h, out_w = out.shape[:2]

    def backward_fn(g):
        gw = np.einsum("hwcij,hwo->ijco", windows, g, optimize=True)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += g @ w[i, j].T
        gx = gxp[padding:padding + height, padding:padding + width]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return _record("conv2d", inputs, out, backward_fn)


def interp_indices(n_in, n_out):
    """Source indices and blend weights for half-pixel-centers linear interpolation."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation between sizes {n_in} and {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _lerp(x, axis, lo, hi, frac):
    x = np.moveaxis(x, axis, 0)
    shape = (-1,) + (1,) * (x.ndim - 1)
    top = x[lo]
    out = top + frac.reshape(shape) * (x[hi] - top)
    return np.moveaxis(out, 0, axis)


def _lerp_backward(g, axis, n_in, lo, hi, frac):
    g = np.moveaxis(g, axis, 0)
    shape = (-1,) + (1,) * (g.ndim - 1)
    grad = np.zeros((n_in,) + g.shape[1:])
    np.add.at(grad, lo, g * (1.0 - frac).reshape(shape))
    np.add.at(grad, hi, g * frac.reshape(shape))
    return np.moveaxis(grad, 0, axis)


def bilinear_resize(a, out_h, out_w):
    """Resize an HxW or HxWxC map with half-pixel-centers bilinear interpolation."""
    a = as_tensor(a)
    if a.ndim not in (2, 3):
        raise ShapeError(f"bilinear_resize expects HxW or HxWxC, got {a.shape}")
    height, width = a.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize to zero-size output {out_h}x{out_w}")
    if (height, width) == (out_h, out_w):
        return _record("bilinear_resize", (a,), a.data, lambda g: (g,))
    rows = interp_indices(height, out_h)
    cols = interp_indices(width, out_w)
    out = _lerp(_lerp(a.data, 0, *rows), 1, *cols)

    def backward_fn(g):
        g = _lerp_backward(g, 1, width, *cols)
        return (_lerp_backward(g, 0, height, *rows),)

    return _record("bilinear_resize", (a,), out, backward_fn)
