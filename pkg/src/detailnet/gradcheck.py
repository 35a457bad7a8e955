"""Central finite-difference checks of every primitive and block, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import blocks
from .blocks import ParamStore
from .network import NetworkConfig, build_network
from .tensor import (
    ConvSpec,
    Tensor,
    add,
    backward,
    batchnorm_frozen,
    bilinear_resize,
    bilinear_upsample,
    channel_scale,
    concat_channels,
    conv2d,
    default_dtype,
    global_avg_pool,
    max_pool2d,
    no_grad,
    relu,
    sigmoid,
    softplus,
    weighted_sum,
)
from .trainer import log_l1_loss

TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm of the two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, indices, eps: float) -> np.ndarray:
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices))
    with no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().item())
            flat[i] = orig - eps
            down = float(fn().item())
            flat[i] = orig
            out[k] = (up - down) / (2 * eps)
    return out


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6,
                    max_entries: int = 0, rng=None) -> float:
    """Worst relative error over ``tensors``; ``fn`` rebuilds the scalar loss from them.

    ``max_entries`` > 0 probes a random subset of each tensor's entries.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        size = t.data.size
        if max_entries and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[idx]
        numeric = numeric_grad(fn, t, idx, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class GradCheckRow:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<20} {self.instances:>3}  {self.max_rel_error:.3e}  {status}"


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return weighted_sum(out, proj)


def _case_conv(rng, k):
    dil = (1, 2, 4, 8, 3)[k % 5]
    stride = 1 if k % 2 == 0 else 2
    kh = (3, 1, 3, 5, 3)[k % 5]
    spec = ConvSpec(3, 2, kh, kh, stride=stride, dilation=dil, padding="same")
    x, w, b = _leaf(rng, 1, 2, 5 + k % 3, 6), _leaf(rng, *spec.weight_shape), _leaf(rng, 3)
    oh, ow = spec.output_hw(*x.shape[2:])
    proj = rng.standard_normal((1, 3, oh, ow))
    return (lambda: _projected(conv2d(x, spec, w, b), proj)), [x, w, b], 1e-3


def _unary(op, shape=(2, 3, 4, 5)):
    def case(rng, k):
        x = _leaf(rng, *shape)
        out_shape = op(Tensor(x.data)).shape
        proj = rng.standard_normal(out_shape)
        return (lambda: _projected(op(x), proj)), [x], 1e-6
    return case


def _case_add(rng, k):
    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 3, 4, 4)
    proj = rng.standard_normal(a.shape)
    return (lambda: _projected(add(a, b), proj)), [a, b], 1e-6


def _case_concat(rng, k):
    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 2, 4, 4)
    proj = rng.standard_normal((2, 5, 4, 4))
    return (lambda: _projected(concat_channels([a, b]), proj)), [a, b], 1e-6


def _case_channel_scale(rng, k):
    x, w = _leaf(rng, 2, 3, 4, 5), _leaf(rng, 2, 3, 1, 1)
    proj = rng.standard_normal(x.shape)
    return (lambda: _projected(channel_scale(x, w), proj)), [x, w], 1e-6


def _case_bn(rng, k):
    x, gamma, beta = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3), _leaf(rng, 3)
    mean = Tensor(rng.standard_normal(3))
    var = Tensor(rng.uniform(0.5, 2.0, 3))
    proj = rng.standard_normal(x.shape)
    return (lambda: _projected(batchnorm_frozen(x, gamma, beta, mean, var, 1e-5), proj)), [x, gamma, beta], 1e-6


def _case_loss(rng, k):
    pred = Tensor(rng.uniform(0.2, 5.0, (2, 1, 6, 6)), requires_grad=True)
    truth = rng.uniform(0.2, 5.0, (2, 1, 6, 6))
    mask = rng.random((2, 1, 6, 6)) > 0.2
    return (lambda: log_l1_loss(pred, truth, mask)), [pred], 1e-6


def _store() -> ParamStore:
    return ParamStore(np.float64)


def _randomize_bn(store: ParamStore, rng):
    # identity statistics would hide bugs in the normalisation backward
    for name, t in store.items():
        if name.endswith(".gamma") or name.endswith(".var"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith(".beta") or name.endswith(".mean"):
            t.data[...] = rng.normal(0, 0.2, t.shape)


def _trainable(store):
    return list(store.trainable().values())


def _case_stem(rng, k):
    store = _store()
    blocks.init_stem(store, rng, 4)
    _randomize_bn(store, rng)
    x = _leaf(rng, 1, 3, 8, 8)
    proj = rng.standard_normal((1, 4, 2, 2))
    return (lambda: _projected(blocks.stem_forward(x, store), proj)), [x] + _trainable(store), 1e-6


def _case_bottleneck(rng, k):
    dil = blocks.DILATIONS[k % 4]
    store = _store()
    in_ch = 8 if k % 2 == 0 else 6
    blocks.init_bottleneck(store, rng, "unit", in_ch, 8, dil)
    _randomize_bn(store, rng)
    x = _leaf(rng, 1, in_ch, 5, 5)
    proj = rng.standard_normal((1, 8, 5, 5))
    return (lambda: _projected(blocks.bottleneck_forward(x, store, "unit", dil), proj)), [x] + _trainable(store), 1e-6


def _case_crb(rng, k):
    dil = blocks.DILATIONS[k % 4]
    store = _store()
    blocks.init_crb(store, rng, "crb", 6, 4, dil)
    _randomize_bn(store, rng)
    for n in store.names("crb."):
        if n.endswith(".bias"):
            store[n].data[...] = rng.normal(0, 0.3, store[n].shape)
    x = _leaf(rng, 1, 6, 5, 5)
    proj = rng.standard_normal((1, 4, 5, 5))
    return (lambda: _projected(blocks.crb_forward(x, store, "crb", dil), proj)), [x] + _trainable(store), 1e-6


def _case_afb(rng, k):
    store = _store()
    blocks.init_afb(store, rng, "afb", 8, 4)
    for n in store.names("afb."):
        if n.endswith(".bias"):
            store[n].data[...] = rng.normal(0, 0.3, store[n].shape)
    dotted, solid = _leaf(rng, 2, 8, 3, 4), _leaf(rng, 2, 8, 3, 4)
    proj = rng.standard_normal(solid.shape)
    return (lambda: _projected(blocks.afb_forward(dotted, solid, store, "afb"), proj)), [dotted, solid] + _trainable(store), 1e-6


CASES = [
    ("conv2d", _case_conv),
    ("max_pool2d", _unary(lambda x: max_pool2d(x, 3, 2, 1))),
    ("global_avg_pool", _unary(global_avg_pool)),
    ("bilinear_upsample", _unary(lambda x: bilinear_upsample(x, 2))),
    ("bilinear_resize", _unary(lambda x: bilinear_resize(x, 7, 3))),
    ("relu", _unary(relu)),
    ("sigmoid", _unary(sigmoid)),
    ("softplus", _unary(softplus)),
    ("add", _case_add),
    ("concat_channels", _case_concat),
    ("channel_scale", _case_channel_scale),
    ("batchnorm_frozen", _case_bn),
    ("log_l1_loss", _case_loss),
    ("stem", _case_stem),
    ("bottleneck", _case_bottleneck),
    ("crb", _case_crb),
    ("afb", _case_afb),
]


def network_gradcheck(seed: int = 0, per_tensor: int = 1, input_hw=(8, 8), preset: str = "toy") -> GradCheckRow:
    """Whole network in float64 with nothing frozen; probes entries from every block type."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        net = build_network(NetworkConfig.from_preset(preset), seed, freeze_first_two_stages=False, dtype=np.float64)
        for n, t in net.params.items():
            if n.endswith(".bias"):
                t.data[...] = rng.normal(0, 0.1, t.shape)
        h, w = input_hw
        image = Tensor(rng.uniform(0, 1, (1, 3, h, w)))
        truth = rng.uniform(0.5, 3.0, (1, 1, h // 2, w // 2))

        def fn():
            return log_l1_loss(net(image), truth)

        # one weight tensor per block kind, plus biases on the DMG side
        picks = [
            "stem.conv.weight",
            "stage1.unit0.reduce.weight", "stage1.unit0.proj.weight",
            "stage2.unit1.conv.weight", "stage3.unit0.expand.weight", "stage4.unit1.conv.weight",
            "crb4.reduce.weight", "crb4.conv1.weight", "crb4.conv2.bias",
            "crb3.conv1.weight", "afb3.fc1.weight", "afb3.fc2.bias",
            "crb3_fused.conv2.weight", "afb2.fc2.weight", "crb2.reduce.bias",
            "afb1.fc1.bias", "crb1_fused.conv1.weight", "head.weight", "head.bias",
        ]
        tensors = [net.params[p] for p in picks]
        err = check_gradients(fn, tensors, eps=1e-6, max_entries=per_tensor + 1, rng=rng)
    probes = sum(min(t.data.size, per_tensor + 1) for t in tensors)
    return GradCheckRow(f"network({preset},{h}x{w})", probes, err)


def run_suite(instances: int = 5, seed: int = 0, include_network: bool = True,
              preset: str = "toy") -> List[GradCheckRow]:
    rows = []
    with default_dtype(np.float64):
        for name, make in CASES:
            worst = 0.0
            for k in range(instances):
                rng = np.random.default_rng([seed, k, len(rows)])
                fn, tensors, eps = make(rng, k)
                worst = max(worst, check_gradients(fn, tensors, eps=eps))
            rows.append(GradCheckRow(name, instances, worst))
    if include_network:
        rows.append(network_gradcheck(seed, preset=preset))
    return rows


def format_table(rows: Sequence[GradCheckRow]) -> str:
    head = f"{'check':<20} {'n':>3}  {'max rel err':<9}  result"
    return "\n".join([head] + [r.format() for r in rows])
