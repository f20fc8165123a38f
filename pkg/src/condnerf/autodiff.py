"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its inputs and a backward rule on the output tensor when at
least one input requires a gradient. :func:`backward` orders the recorded
graph topologically (a :class:`Tape`) and replays the rules in reverse.

Values default to float32; :func:`precision` switches the default dtype (used
with float64 for finite-difference checks).
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, NumericError

_ids = itertools.count()
_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense array value with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "parents", "backward_fn")
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, dtype=None):
        self.values = np.array(values, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = None
        self.parents = ()
        self.backward_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(op, out, parents, backward_fn):
    """Wrap an op result, checking finiteness and recording the backward rule."""
    if not np.all(np.isfinite(out)):
        raise NumericError(op)
    t = Tensor.__new__(Tensor)
    t.values = out
    t.grad = None
    t.node_id = next(_ids)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = backward_fn
    else:
        t.requires_grad = False
        t.parents = ()
        t.backward_fn = None
    return t


def custom_op(name, inputs, out, backward_fn):
    """Record an op whose forward was computed elsewhere.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    return _record(name, out, [as_tensor(x) for x in inputs], backward_fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.values + b.values, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.values - b.values, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.values * b.values, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.values / b.values

    def bw(g):
        ga = _unbroadcast(g / b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.values, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.values, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", av @ bv, (a, b), bw)


# elementwise unary ----------------------------------------------------------


def relu(x):
    x = as_tensor(x)
    mask = x.values > 0
    return _record("relu", x.values * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v):
    # exp of a nonpositive argument only, so no overflow
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.values)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _record("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)
    return _record("log", out, (x,), lambda g: (g / x.values,))


def sin(x):
    x = as_tensor(x)
    return _record("sin", np.sin(x.values), (x,), lambda g: (g * np.cos(x.values),))


def cos(x):
    x = as_tensor(x)
    return _record("cos", np.cos(x.values), (x,), lambda g: (-g * np.sin(x.values),))


def softplus(x):
    """log(1 + exp(x)) in the max-shifted form."""
    x = as_tensor(x)
    v = x.values
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return _record("softplus", out, (x,), lambda g: (g * _sigmoid(v),))


def square(x):
    x = as_tensor(x)
    return _record("square", x.values * x.values, (x,), lambda g: (2 * g * x.values,))


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.values)
    with np.errstate(divide="ignore"):
        return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


# reductions and shape ops ---------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.sum(x.values, axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.mean(x.values, axis=axis, keepdims=keepdims)
    n = x.values.size // max(np.asarray(out).size, 1)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", np.asarray(out, dtype=x.dtype), (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", out, tensors, bw)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    """Slicing and integer-array indexing (gathers accumulate on backward)."""
    x = as_tensor(x)
    out = x.values[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.values)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("slice", np.array(out, copy=True), (x,), bw)


def take_along_axis(x, indices, axis):
    """Gather with ``np.take_along_axis``; indices must not repeat along ``axis``."""
    x = as_tensor(x)
    out = np.take_along_axis(x.values, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, indices, g, axis=axis)
        return (full,)

    return _record("take_along_axis", out, (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: {exc}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.values, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _record("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(logits):
    return np.exp(log_softmax_np(logits))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (B, K) against integer ``labels`` (B,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("softmax_cross_entropy: label out of range")
    logp = log_softmax_np(logits.values)
    b = logits.shape[0]
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / b),)

    return _record("softmax_cross_entropy", out, (logits,), bw)


# image ops (NHWC) -----------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution; ``x`` is (B, H, W, C) and ``w`` is (kh, kw, C, O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ContractError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, C = x.shape
    kh, kw, _, O = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ContractError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    cols = kernels.im2col(x.values, kh, kw, stride, padding)
    wm = w.values.reshape(kh * kw * C, O)
    out = (cols @ wm).reshape(B, Ho, Wo, O)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.values
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(g2 @ wm.T, x.shape, kh, kw, stride, padding)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _record("conv2d", out, parents, bw)


def max_pool2d(x):
    """2x2 max pooling with stride 2 (ties route to the first maximum)."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ContractError(f"max_pool2d: spatial size {H}x{W} must be even")
    xr = x.values.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = xr.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        gr = gr.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gr.reshape(B, H, W, C),)

    return _record("max_pool2d", out, (x,), bw)


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes of NHWC input."""
    x = as_tensor(x)
    v = x.values
    mu = v.mean(axis=(1, 2), keepdims=True)
    var = v.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv

    def bw(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gy = (g * y).mean(axis=(1, 2), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("instance_norm", y, (x,), bw)


def _interp_matrix(n_out, n_in, dtype):
    """Row-stochastic bilinear weights using pixel-center alignment."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x, height, width):
    """Bilinear resize of NHWC images, expressed as two fixed linear maps."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if (H, W) == (height, width):
        return x
    ah = _interp_matrix(height, H, x.dtype)
    aw = _interp_matrix(width, W, x.dtype)
    xc = x.values.transpose(0, 3, 1, 2)
    out = (ah @ xc @ aw.T).transpose(0, 2, 3, 1)

    def bw(g):
        gc = g.transpose(0, 3, 1, 2)
        return ((ah.T @ gc @ aw).transpose(0, 2, 3, 1),)

    return _record("resize_bilinear", np.ascontiguousarray(out), (x,), bw)


# backward pass --------------------------------------------------------------


@dataclass
class Tape:
    """Recorded ops reachable from a root, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self):
        return [n for n in self.nodes if n.parents]


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""
    if root.values.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads = {root.node_id: np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# optimizer ------------------------------------------------------------------


@dataclass
class RmsPropState:
    learning_rate: float
    decay: float = 0.99
    epsilon: float = 1e-8
    accumulators: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ContractError(f"RMSprop decay must lie in (0, 1), got {self.decay}")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ContractError("RMSprop learning rate and epsilon must be positive")


def rmsprop_step(params, state):
    """One RMSprop update; gradients are cleared afterwards."""
    params = list(params)
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ContractError(f"rmsprop_step: parameters {missing} have no gradient")
    if not state.accumulators:
        state.accumulators = [np.zeros_like(p.values) for p in params]
    if len(state.accumulators) != len(params):
        raise ContractError("rmsprop_step: optimizer state does not match parameter list")
    d, lr, eps = state.decay, state.learning_rate, state.epsilon
    for p, acc in zip(params, state.accumulators):
        g = p.grad
        if acc.shape != p.shape:
            raise ContractError("rmsprop_step: accumulator shape mismatch")
        acc *= d
        acc += (1 - d) * g * g
        p.values -= (lr * g / (np.sqrt(acc) + eps)).astype(p.values.dtype, copy=False)
        p.grad = None
