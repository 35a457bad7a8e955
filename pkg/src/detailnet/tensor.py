"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`TapeNode` holding its inputs
and a closure that maps the output gradient to input gradients. ``backward``
walks the recorded DAG once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ShapeError, UsageError

_default_dtype = np.dtype(np.float32)


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"TapeNode({self.op}, inputs={len(self.inputs)})"


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaves are created directly; non-leaves come out of operations and
    carry a :class:`TapeNode` when any input requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = TapeNode(op, tuple(inputs), backward_fn)
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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> dict:
    """Back-propagate from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf with
    ``requires_grad`` set. Returns ``{leaf: grad}`` for the leaves reached.
    The tape is released afterwards; calling again raises :class:`UsageError`.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return {loss: loss.grad}
    if loss.node.consumed:
        raise UsageError("backward called twice on the same graph; the tape was already consumed")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is not None and inp.requires_grad and id(inp) not in seen:
                if inp.node.consumed:
                    raise UsageError("graph contains a node whose tape was already consumed")
                stack.append((inp, False))

    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for t in reversed(order):
        g = pending.pop(id(t), None)
        node = t.node
        if g is not None:
            grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if inp.node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                    leaves[inp] = inp.grad
                else:
                    key = id(inp)
                    pending[key] = ig if key not in pending else pending[key] + ig
        node.consumed = True
        node.backward_fn = None
    return leaves


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution. ``dilation`` spaces the kernel taps."""

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: str = "same"

    def __post_init__(self):
        for field in ("out_channels", "in_channels", "kernel_h", "kernel_w"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def extent(self):
        """Effective (dilated) kernel footprint."""
        return (self.dilation * (self.kernel_h - 1) + 1, self.dilation * (self.kernel_w - 1) + 1)

    def pads(self):
        if self.padding == "valid":
            return 0, 0
        eh, ew = self.extent
        return (eh - 1) // 2, (ew - 1) // 2

    def output_hw(self, h: int, w: int):
        eh, ew = self.extent
        if self.padding == "same":
            return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1
        if h < eh or w < ew:
            raise ShapeError(f"input {h}x{w} smaller than dilated kernel extent {eh}x{ew} under valid padding")
        return (h - eh) // self.stride + 1, (w - ew) // self.stride + 1


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dilated 2-D cross-correlation, ``y[i] = sum_k x[i + r*k] * w[k]`` summed over input channels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    oh, ow = spec.output_hw(h, w)
    ph, pw = spec.pads()
    kh, kw, s, d = spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation

    cols = kernels.im2col(x.data, kh, kw, s, d, ph, pw, oh, ow)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))

    def _backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        dx = dw = db = None
        if x.requires_grad:
            dx = kernels.col2im(gm @ wmat, n, c, h, w, kh, kw, s, d, ph, pw, oh, ow)
        if weight.requires_grad:
            dw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=0)
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(y, "conv2d", inputs, _backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got shape {x.shape}")
    if kernel < 1 or stride < 1 or pad < 0 or pad > kernel // 2:
        raise ConfigError(f"bad pooling geometry kernel={kernel} stride={stride} pad={pad}")
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small")
    out, arg = kernels.maxpool_forward(x.data, kernel, stride, pad, oh, ow)

    def _backward(g):
        return (kernels.maxpool_backward(g, arg, h, w),)

    return Tensor.from_op(out, "max_pool2d", (x,), _backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool over an empty spatial plane")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    hw = h * w

    def _backward(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return Tensor.from_op(out, "global_avg_pool", (x,), _backward)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic linear interpolation matrix (half-pixel centres, edges clamped)."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the last two axes (align-corners=false)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def _backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return Tensor.from_op(out, "bilinear_resize", (x,), _backward)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    h, w = x.shape[2:]
    return bilinear_resize(x, int(factor) * h, int(factor) * w)


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return Tensor.from_op(out, "relu", (x,), lambda g: (g * pos,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0)
    return Tensor.from_op(out, "softplus", (x,), lambda g: (g * _sigmoid(v),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor.from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=1))

    return Tensor.from_op(out, "concat_channels", tuple(tensors), _backward)


def channel_scale(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each channel plane of ``x`` [N,C,H,W] by ``weights`` [N,C,1,1]."""
    if x.ndim != 4 or weights.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"channel_scale: weights {weights.shape} do not match map {x.shape}")
    out = x.data * weights.data

    def _backward(g):
        return g * weights.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return Tensor.from_op(out, "channel_scale", (x, weights), _backward)


def elementwise(kind: str, *operands):
    """Dispatch by name; handy for tables of primitives."""
    table = {
        "relu": relu,
        "sigmoid": sigmoid,
        "softplus": softplus,
        "add": add,
        "concat_channels": lambda *ts: concat_channels(ts),
        "channel_scale": channel_scale,
    }
    if kind not in table:
        raise ConfigError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


def batchnorm_frozen(x: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalisation with stored statistics only.

    ``mean`` and ``var`` are treated as constants.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm_frozen expects NCHW input, got shape {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm_frozen: {name} shape {t.shape} != ({c},)")
    if np.any(var.data < 0):
        raise DataError("batchnorm_frozen: negative running variance")
    shape = (1, c, 1, 1)
    std = np.sqrt(var.data + eps).reshape(shape)
    xhat = (x.data - mean.data.reshape(shape)) / std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def _backward(g):
        dx = g * (gamma.data.reshape(shape) / std) if x.requires_grad else None
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return Tensor.from_op(out, "batchnorm_frozen", (x, gamma, beta), _backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return Tensor.from_op(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` with constant weights; used to project outputs to a scalar."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} != {x.shape}")
    return Tensor.from_op(np.asarray((x.data * weights).sum()), "weighted_sum", (x,), lambda g: (g * weights,))
