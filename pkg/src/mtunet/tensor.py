"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient (and recording is enabled) the result remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded nodes in reverse creation order,
so each node is visited exactly once after all of its consumers.

Binary operations broadcast like numpy; gradients are summed back to the
operand shape.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NonFiniteError, UsageError

_counter = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference of frozen parts)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus optional gradient buffer.

    ``grad`` exists iff ``requires_grad``; for leaves it accumulates across
    backward calls until :meth:`zero_grad`.
    """

    def __init__(self, data, requires_grad=False, name=None):
        data = np.array(data, dtype=np.float64)
        _check_finite(data, "Tensor()")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(data) if requires_grad else None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)

    @classmethod
    def _from_op(cls, data, parents, backward, op, check=True):
        data = np.asarray(data, dtype=np.float64)
        if check:  # views and reshapes of finite data skip this
            _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.op = op
        out._seq = next(_counter)
        tracked = _recording and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out.grad = np.zeros_like(data) if tracked else None
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        Graph(self).backward()

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Graph:
    """The recorded nodes reachable from ``loss``, in creation order."""

    def __init__(self, loss):
        self.loss = loss
        seen = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        self.nodes = sorted(seen.values(), key=lambda n: n._seq)

    def backward(self):
        loss = self.loss
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")
        for node in self.nodes:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        loss.grad = loss.grad + np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = parent.grad + _unbroadcast(np.asarray(g), parent.shape)


def backward(loss):
    """Populate ``.grad`` of every tensor the scalar ``loss`` depends on."""
    Graph(loss).backward()


# -- elementwise -------------------------------------------------------------

def _binary_shape(a, b, op):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a, factor):
    factor = float(factor)
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a):
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    s = expit(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    t = np.tanh(a.data)
    return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a):
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._from_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"hadamard": hadamard, "add": add}


def elementwise(kind, *operands):
    """Dispatch ``kind`` in {relu, sigmoid, tanh, hadamard, add, scale}.

    Binary kinds require identical shapes; ``scale`` takes a tensor and a float.
    """
    if kind in _UNARY:
        if len(operands) != 1:
            raise UsageError(f"{kind} takes one operand")
        return _UNARY[kind](as_tensor(operands[0]))
    if kind in _BINARY:
        a, b = (as_tensor(x) for x in operands)
        if a.shape != b.shape:
            raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")
        return _BINARY[kind](a, b)
    if kind == "scale":
        tensor, factor = operands
        return scale(as_tensor(tensor), factor)
    raise UsageError(f"unknown elementwise kind {kind!r}")


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return Tensor._from_op(data, (a,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose",
                           check=False)


def swap_last(a):
    """Exchange the last two axes."""
    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last",
                           check=False)


def take(a, index):
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), back, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tensors, back, "concat")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading axes broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


def softmax_rows(x):
    """Softmax along the last axis, with max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (x,), back, "softmax_rows")


def log_softmax_rows(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), back, "log_softmax_rows")


# -- convolution and pooling ------------------------------------------------

def _as_batch(x, rank, op):
    if x.ndim == rank - 1:
        return x.reshape((1,) + x.shape), True
    if x.ndim != rank:
        raise DimensionError(f"{op}: expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (C×H×W or B×C×H×W) with O×C×k×k kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    batched, squeezed = _as_batch(x, 4, "conv2d")
    if kernels.ndim != 4 or kernels.shape[1] != batched.shape[1]:
        raise DimensionError(f"conv2d: kernels {kernels.shape} do not fit input {x.shape}")
    n, c, h, w = batched.shape
    o, _, kh, kw = kernels.shape
    if kh != kw:
        raise DimensionError("conv2d: kernels must be square")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}×{kw} larger than padded input {hp}×{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(batched.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    kd = kernels.data
    out = np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def back(g):
        g4 = g.reshape(n, o, ho, wo)
        gk = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(kd[:, :, i, j], g4, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx.reshape(x.shape), gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    if squeezed:
        out = out[0]
    return Tensor._from_op(out, parents, back, "conv2d")


def pool2d(kind, x, window, stride=None):
    """Max or average pooling over square windows of C×H×W or B×C×H×W input.

    Max-pool ties route the gradient to the first maximum in row-major order.
    """
    if kind not in ("max", "avg"):
        raise UsageError(f"unknown pooling kind {kind!r}")
    x = as_tensor(x)
    stride = window if stride is None else stride
    batched, squeezed = _as_batch(x, 4, "pool2d")
    n, c, h, w = batched.shape
    if window > h or window > w:
        raise DimensionError(f"pool2d: window {window} exceeds input {h}×{w}")
    if (h - window) % stride or (w - window) % stride:
        raise DimensionError(f"pool2d: window {window}/stride {stride} leaves a partial window on {h}×{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    xd = batched.data

    def view(i, j):
        return xd[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride][:, :, :ho, :wo]

    offsets = [(i, j) for i in range(window) for j in range(window)]
    if stride == window:
        # non-overlapping windows: gather each window into a trailing axis
        tiles = xd.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
        out = tiles.mean(axis=-1) if kind == "avg" else tiles.max(axis=-1)

        def back(g):
            g4 = g.reshape(n, c, ho, wo, 1)
            if kind == "avg":
                spread = np.broadcast_to(g4 / len(offsets), tiles.shape)
            else:
                # argmax returns the first maximum in row-major window order
                spread = (np.arange(len(offsets)) == tiles.argmax(axis=-1)[..., None]) * g4
            gx = spread.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx.reshape(x.shape),)
    elif kind == "avg":
        out = sum(view(i, j) for i, j in offsets) / len(offsets)

        def back(g):
            g4 = g.reshape(n, c, ho, wo) / len(offsets)
            gx = np.zeros_like(xd)
            for i, j in offsets:
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g4
            return (gx.reshape(x.shape),)
    else:
        out = view(0, 0).copy()
        arg = np.zeros(out.shape, dtype=np.int64)
        for k, (i, j) in enumerate(offsets[1:], start=1):
            v = view(i, j)
            better = v > out
            out[better] = v[better]
            arg[better] = k

        def back(g):
            g4 = g.reshape(n, c, ho, wo)
            gx = np.zeros_like(xd)
            for k, (i, j) in enumerate(offsets):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g4 * (arg == k)
            return (gx.reshape(x.shape),)

    if squeezed:
        out = out[0]
    return Tensor._from_op(out, (x,), back, f"pool2d_{kind}")
