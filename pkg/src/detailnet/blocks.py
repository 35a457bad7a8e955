"""Composite building blocks: stem, dilated bottleneck stages, CRB and AFB.

Blocks are pure functions of ``(input, params, prefix)``. Parameters live in
a flat :class:`ParamStore` addressed by dotted names, which is also the
checkpoint addressing scheme.
"""

from __future__ import annotations

from typing import Dict, Iterator, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    ConvSpec,
    Tensor,
    add,
    batchnorm_frozen,
    channel_scale,
    concat_channels,
    conv2d,
    get_default_dtype,
    global_avg_pool,
    max_pool2d,
    relu,
    sigmoid,
)

DILATIONS = (1, 2, 4, 8)
BN_STATS = ("gamma", "beta", "mean", "var")


class ParamStore:
    """Ordered name -> Tensor table with a learning-rate group per tensor.

    A tensor is trainable iff ``requires_grad`` is set; frozen tensors
    (including every batch-norm statistic) never receive gradients.
    """

    def __init__(self, dtype=None):
        self.dtype = np.dtype(dtype or get_default_dtype())
        self.tensors: Dict[str, Tensor] = {}
        self.groups: Dict[str, str] = {}
        self.specs: Dict[str, ConvSpec] = {}
        self.bn_eps = 1e-5

    def add(self, name: str, data, group: str, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, prefix: str = ""):
        return [n for n in self.tensors if n.startswith(prefix)]

    def trainable(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def frozen(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if not t.requires_grad}

    def freeze(self, prefix: str):
        for n in self.names(prefix):
            self.tensors[n].requires_grad = False

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grad_map(self) -> Dict[str, np.ndarray]:
        return {n: t.grad for n, t in self.tensors.items() if t.requires_grad and t.grad is not None}

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.data.size for t in self.tensors.values() if t.requires_grad or not trainable_only)

    def copy(self) -> "ParamStore":
        new = ParamStore(self.dtype)
        new.groups = dict(self.groups)
        new.specs = dict(self.specs)
        new.bn_eps = self.bn_eps
        for n, t in self.tensors.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
            new.tensors[n] = nt
        return new

    def astype(self, dtype) -> "ParamStore":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        for t in new.tensors.values():
            t.data = t.data.astype(dtype)
        return new

    def __deepcopy__(self, memo):
        return self.copy()


# ---------------------------------------------------------------------------
# initialisers


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    receptive = int(np.prod(shape[2:]))
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def add_conv(store: ParamStore, name: str, spec: ConvSpec, rng, group: str, init: str, bias: bool):
    init_fn = he_normal if init == "he" else xavier_uniform
    store.add(f"{name}.weight", init_fn(rng, spec.weight_shape), group)
    if bias:
        store.add(f"{name}.bias", np.zeros(spec.out_channels), group)
    store.specs[name] = spec


def add_bn(store: ParamStore, name: str, channels: int, group: str):
    identity = {"gamma": 1.0, "beta": 0.0, "mean": 0.0, "var": 1.0}
    for stat in BN_STATS:
        store.add(f"{name}.{stat}", np.full(channels, identity[stat]), group, trainable=False)


def init_stem(store, rng, out_channels, prefix="stem", group="dfe"):
    add_conv(store, f"{prefix}.conv", ConvSpec(out_channels, 3, 7, 7, stride=2), rng, group, "he", bias=False)
    add_bn(store, f"{prefix}.bn", out_channels, group)


def init_bottleneck(store, rng, prefix, in_ch, out_ch, dilation, group="dfe"):
    mid = max(1, out_ch // 4)
    add_conv(store, f"{prefix}.reduce", ConvSpec(mid, in_ch, 1, 1), rng, group, "he", bias=False)
    add_bn(store, f"{prefix}.reduce_bn", mid, group)
    add_conv(store, f"{prefix}.conv", ConvSpec(mid, mid, 3, 3, dilation=dilation), rng, group, "he", bias=False)
    add_bn(store, f"{prefix}.conv_bn", mid, group)
    add_conv(store, f"{prefix}.expand", ConvSpec(out_ch, mid, 1, 1), rng, group, "he", bias=False)
    add_bn(store, f"{prefix}.expand_bn", out_ch, group)
    if in_ch != out_ch:
        add_conv(store, f"{prefix}.proj", ConvSpec(out_ch, in_ch, 1, 1), rng, group, "he", bias=False)
        add_bn(store, f"{prefix}.proj_bn", out_ch, group)


def init_resblock(store, rng, prefix, in_ch, out_ch, n_units, dilation, group="dfe"):
    if dilation not in DILATIONS:
        raise ConfigError(f"dilation must be one of {DILATIONS}, got {dilation}")
    for u in range(n_units):
        init_bottleneck(store, rng, f"{prefix}.unit{u}", in_ch if u == 0 else out_ch, out_ch, dilation, group)


def init_crb(store, rng, prefix, in_ch, reduced, dilation, group="dmg"):
    if in_ch < reduced:
        raise ConfigError(f"CRB input width {in_ch} is below the reduced width {reduced}")
    add_conv(store, f"{prefix}.reduce", ConvSpec(reduced, in_ch, 1, 1), rng, group, "xavier", bias=True)
    add_conv(store, f"{prefix}.conv1", ConvSpec(reduced, reduced, 3, 3, dilation=dilation), rng, group, "xavier", bias=True)
    add_bn(store, f"{prefix}.bn1", reduced, group)
    add_conv(store, f"{prefix}.conv2", ConvSpec(reduced, reduced, 3, 3, dilation=dilation), rng, group, "xavier", bias=True)


def init_afb(store, rng, prefix, channels, ratio, group="dmg"):
    hidden = max(1, channels // ratio)
    add_conv(store, f"{prefix}.fc1", ConvSpec(hidden, 2 * channels, 1, 1), rng, group, "xavier", bias=True)
    add_conv(store, f"{prefix}.fc2", ConvSpec(channels, hidden, 1, 1), rng, group, "xavier", bias=True)


# ---------------------------------------------------------------------------
# forward passes


def _conv(x, params: ParamStore, name: str, dilation: Optional[int] = None) -> Tensor:
    spec = params.specs[name]
    if dilation is not None and spec.dilation != dilation:
        raise ConfigError(f"{name}: built with dilation {spec.dilation}, called with {dilation}")
    bias = params.tensors.get(f"{name}.bias")
    return conv2d(x, spec, params[f"{name}.weight"], bias)


def _bn(x, params: ParamStore, name: str) -> Tensor:
    return batchnorm_frozen(
        x, params[f"{name}.gamma"], params[f"{name}.beta"], params[f"{name}.mean"], params[f"{name}.var"], params.bn_eps
    )


def stem_forward(image: Tensor, params: ParamStore, prefix: str = "stem") -> Tensor:
    """7x7/2 conv, BN, relu, 3x3/2 max pool: exactly 1/4 resolution."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"stem expects an [N,3,H,W] image, got {image.shape}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"image size {h}x{w} is not divisible by 4")
    x = relu(_bn(_conv(image, params, f"{prefix}.conv"), params, f"{prefix}.bn"))
    return max_pool2d(x, kernel=3, stride=2, pad=1)


def bottleneck_forward(x: Tensor, params: ParamStore, prefix: str, dilation: int) -> Tensor:
    y = relu(_bn(_conv(x, params, f"{prefix}.reduce"), params, f"{prefix}.reduce_bn"))
    y = relu(_bn(_conv(y, params, f"{prefix}.conv", dilation), params, f"{prefix}.conv_bn"))
    y = _bn(_conv(y, params, f"{prefix}.expand"), params, f"{prefix}.expand_bn")
    if f"{prefix}.proj" in params.specs:
        skip = _bn(_conv(x, params, f"{prefix}.proj"), params, f"{prefix}.proj_bn")
    else:
        skip = x
    return relu(add(y, skip))


def resblock_forward(x: Tensor, params: ParamStore, prefix: str, dilation: int) -> Tensor:
    """Run every bottleneck unit of one stage."""
    if dilation not in DILATIONS:
        raise ConfigError(f"dilation must be one of {DILATIONS}, got {dilation}")
    u = 0
    while f"{prefix}.unit{u}.reduce" in params.specs:
        x = bottleneck_forward(x, params, f"{prefix}.unit{u}", dilation)
        u += 1
    if u == 0:
        raise ConfigError(f"no bottleneck units found under {prefix!r}")
    return x


def crb_forward(x: Tensor, params: ParamStore, prefix: str, dilation: int) -> Tensor:
    """Channel Reduce Block: 1x1 reduction then a dilated basic residual block."""
    spec = params.specs[f"{prefix}.reduce"]
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"{prefix}: expected {spec.in_channels} input channels, got shape {x.shape}")
    skip = _conv(x, params, f"{prefix}.reduce")
    y = relu(_bn(_conv(skip, params, f"{prefix}.conv1", dilation), params, f"{prefix}.bn1"))
    y = _conv(y, params, f"{prefix}.conv2", dilation)
    return relu(add(y, skip))


def afb_attention(dotted: Tensor, solid: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Per-channel weights in (0, 1), shape [N, C, 1, 1], from the joint global context."""
    if dotted.shape != solid.shape:
        raise ShapeError(f"{prefix}: dotted {dotted.shape} and solid {solid.shape} inputs differ")
    ctx = global_avg_pool(concat_channels([dotted, solid]))
    ctx = relu(_conv(ctx, params, f"{prefix}.fc1"))
    return sigmoid(_conv(ctx, params, f"{prefix}.fc2"))


def afb_forward(dotted: Tensor, solid: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Attention Fuse Block: ``solid + dotted * attention``."""
    weights = afb_attention(dotted, solid, params, prefix)
    return add(solid, channel_scale(dotted, weights))


def force_attention(params: ParamStore, value: float, prefix: str = "afb") -> ParamStore:
    """Pin every AFB weight to exactly 0 or 1 by overriding the last bias with -inf/+inf.

    Returns a modified copy. Forward-only: gradients through an overridden
    block are undefined.
    """
    if value not in (0, 1):
        raise ConfigError("attention can only be forced to 0 or 1")
    out = params.copy()
    fill = -np.inf if value == 0 else np.inf
    hit = False
    for name in out.names(prefix):
        if name.endswith(".fc2.bias"):
            out[name].data[...] = fill
            hit = True
    if not hit:
        raise ConfigError(f"no attention blocks under {prefix!r}")
    return out


__all__ = [
    "ParamStore",
    "DILATIONS",
    "stem_forward",
    "bottleneck_forward",
    "resblock_forward",
    "crb_forward",
    "afb_attention",
    "afb_forward",
    "force_attention",
    "init_stem",
    "init_bottleneck",
    "init_resblock",
    "init_crb",
    "init_afb",
    "he_normal",
    "xavier_uniform",
]
