"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable op records its parents and a closure mapping the
output gradient to per-parent gradients.  Nodes get a monotonically
increasing id on creation, so reverse id order is a valid topological
order for :meth:`Tensor.backward`.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from . import _kernels

_ids = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Incompatible tensor dimensions."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy()


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = _as_f64(data)
        out.grad = None
        out._id = next(_ids)
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node._op}")
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a):
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a):
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# Reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._make(out, (a,), backward, "mean")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a, index, axis=0):
    """Select entries ``index`` along ``axis`` (gradient scatters back)."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (index,), g)
        return (full,)

    return Tensor._make(np.take(a.data, index, axis=axis), (a,), backward, "take")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._make(out, tensors, backward, "concat")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Neural network ops


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; weight is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """NHWC cross-correlation with kernel [k, k, Cin, Cout]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported")
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{w} with pad {pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _kernels.im2col(xp, k, stride, ho, wo).reshape(-1, k * k * cin)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k * k * cin)
            dxp = _kernels.col2im(dcols, h + 2 * pad, w + 2 * pad, k, stride)
            gx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def avgpool2d(x, size=2):
    """Non-overlapping average pooling (stride == size); trailing rows/cols dropped."""
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"avgpool2d: input {h}x{w} smaller than window {size}")
    crop = x.data[:, :ho * size, :wo * size, :]
    out = crop.reshape(n, ho, size, wo, size, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, size, axis=1), size, axis=2) / (size * size)
        gx[:, :ho * size, :wo * size, :] = up
        return (gx,)

    return Tensor._make(out, (x,), backward, "avgpool2d")


def temporal_shift(x, frames, fold):
    """Shift ``fold`` channels one frame back and ``fold`` one frame forward.

    ``x`` is [N*frames, H, W, C] with frames contiguous per clip; vacated
    positions are zero-filled.  With ``fold == 0`` this is the identity.
    """
    if fold == 0:
        return x
    nt, h, w, c = x.shape
    if nt % frames or 2 * fold > c:
        raise ShapeError(f"temporal_shift: bad frames={frames} / fold={fold} for shape {x.shape}")

    def shift(arr, sign):
        a = arr.reshape(nt // frames, frames, h, w, c)
        out = a.copy()
        out[:, :, :, :, :2 * fold] = 0.0
        # channels [0, fold) read from the next frame, [fold, 2*fold) from the previous
        if sign > 0:
            out[:, :-1, :, :, :fold] = a[:, 1:, :, :, :fold]
            out[:, 1:, :, :, fold:2 * fold] = a[:, :-1, :, :, fold:2 * fold]
        else:
            out[:, 1:, :, :, :fold] = a[:, :-1, :, :, :fold]
            out[:, :-1, :, :, fold:2 * fold] = a[:, 1:, :, :, fold:2 * fold]
        return out.reshape(nt, h, w, c)

    return Tensor._make(shift(x.data, +1), (x,), lambda g: (shift(g, -1),), "temporal_shift")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def softmax(x, axis=-1):
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def cross_entropy(logits, labels, reduction="mean"):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    per_sample = neg(tsum(mul(logp, Tensor(onehot)), axis=1))
    if reduction == "none":
        return per_sample
    return mean(per_sample)


# ---------------------------------------------------------------------------
# Optimisation


def clip_grad_norm(params, max_norm):
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def sgd_step(params, lr, momentum=0.0, velocity=None, weight_decay=0.0):
    """In-place SGD with classic momentum: ``v = m*v + g``; ``p -= lr*v``.

    ``velocity`` is a list parallel to ``params`` (entries may be None) and is
    updated in place; parameters without a gradient are left untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if velocity is None:
        velocity = [None] * len(params)
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            v = g.copy() if velocity[i] is None else momentum * velocity[i] + g
            velocity[i] = v
        else:
            v = g
        p.data = p.data - lr * v
    return velocity


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.velocity, self.weight_decay)
