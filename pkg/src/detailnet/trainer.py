"""Loss, schedules, optimiser, augmentation and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .blocks import ParamStore
from .data import CameraIntrinsics, RgbdSample
from .errors import ConfigError, DataError, UsageError
from .network import DepthNet
from .tensor import Tensor, backward, bilinear_resize

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss


def log_l1_loss(pred: Tensor, truth, mask=None) -> Tensor:
    """Mean over valid pixels of ``|ln(truth + 1) - ln(pred + 1)|``."""
    truth = np.asarray(truth)
    mask = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape or mask.shape != truth.shape:
        raise DataError(f"loss operands disagree: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DataError("no valid pixels in loss mask")
    if np.any(truth[mask] < 0):
        raise DataError("negative ground-truth depth on a valid pixel")
    if np.any(pred.data[mask] <= -1):
        raise DataError("prediction <= -1 on a valid pixel; log(pred + 1) undefined")
    p = pred.data
    diff = np.where(mask, np.log1p(truth.astype(p.dtype)) - np.log1p(np.where(mask, p, 0)), 0)
    value = np.asarray(np.abs(diff).sum() / n, dtype=p.dtype)

    def _backward(g):
        return (g * (-np.sign(diff) / (1.0 + np.where(mask, p, 0)) * mask / n).astype(p.dtype),)

    return Tensor.from_op(value, "log_l1_loss", (pred,), _backward)


# ---------------------------------------------------------------------------
# learning rate


@dataclass(frozen=True)
class LrSchedule:
    l_init: float
    l_end: float
    decay_steps: int
    power: float = 1.0

    def __post_init__(self):
        if not self.l_init > self.l_end > 0:
            raise ConfigError(f"need l_init > l_end > 0, got {self.l_init}, {self.l_end}")
        if self.decay_steps < 1 or self.power <= 0:
            raise ConfigError(f"decay_steps must be >= 1 and power > 0 ({self.decay_steps}, {self.power})")

    def __call__(self, step: int) -> float:
        return poly_lr(self, step)


def poly_lr(schedule: LrSchedule, global_step: int) -> float:
    """Polynomial decay from ``l_init`` to ``l_end``; steps past ``decay_steps`` stay at ``l_end``."""
    if global_step < 0:
        raise ConfigError(f"global_step must be non-negative, got {global_step}")
    step = min(global_step, schedule.decay_steps)
    frac = 1.0 - step / schedule.decay_steps
    return (schedule.l_init - schedule.l_end) * frac ** schedule.power + schedule.l_end


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], moments: Dict[str, list], lr,
              step: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update.

    ``lr`` is a float or a ``{name: lr}`` mapping. ``moments`` maps names to
    ``[m, v]`` arrays and is created lazily.
    """
    if step < 1:
        raise UsageError(f"Adam step counter starts at 1, got {step}")
    unknown = set(grads) - set(params)
    if unknown:
        raise UsageError(f"gradient for frozen or unknown parameter(s): {sorted(unknown)[:5]}")
    missing = set(params) - set(grads)
    if missing:
        raise UsageError(f"no gradient for trainable parameter(s): {sorted(missing)[:5]}")
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if name not in moments:
            moments[name] = [np.zeros_like(p), np.zeros_like(p)]
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= (rate * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, moments


class Adam:
    """Adam over the trainable tensors of a :class:`ParamStore`, one learning rate per group."""

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments: Dict[str, list] = {}

    def step(self, grads: Dict[str, np.ndarray], group_lr: Dict[str, float], step: int):
        trainable = self.store.trainable()
        frozen = set(grads) & set(self.store.frozen())
        if frozen:
            raise UsageError(f"gradient supplied for frozen parameter(s): {sorted(frozen)[:5]}")
        lr = {n: group_lr[self.store.groups[n]] for n in trainable}
        adam_step({n: t.data for n, t in trainable.items()}, grads, self.moments, lr, step,
                  self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    brightness_delta_range: tuple = (-0.2, 0.2)
    contrast_factor_range: tuple = (0.8, 1.2)
    flip_probability: float = 0.5
    enabled: bool = True

    def validate(self):
        lo, hi = self.brightness_delta_range
        clo, chi = self.contrast_factor_range
        if lo > hi or clo > chi or clo < 0:
            raise ConfigError(f"bad augmentation ranges {self.brightness_delta_range}, {self.contrast_factor_range}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        return self


@dataclass(frozen=True)
class AugmentDraw:
    brightness: float
    contrast: float
    flip: bool


def draw_augmentation(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentDraw:
    # draw order is part of the reproducibility contract: brightness, contrast, flip
    delta = float(rng.uniform(*cfg.brightness_delta_range))
    factor = float(rng.uniform(*cfg.contrast_factor_range))
    flip = bool(rng.random() < cfg.flip_probability)
    return AugmentDraw(delta, factor, flip)


def apply_augmentation(sample: RgbdSample, draw: AugmentDraw) -> RgbdSample:
    """Brightness shift, contrast about the image mean, clamp; flip moves all planes together."""
    rgb = sample.rgb + np.float32(draw.brightness)
    mean = rgb.mean(dtype=np.float64)
    # x*f + (1-f)*mean is exact at f=1
    rgb = rgb * np.float32(draw.contrast) + np.float32((1.0 - draw.contrast) * mean)
    rgb = np.clip(rgb, 0.0, 1.0)
    depth, mask, k = sample.depth, sample.mask, sample.intrinsics
    if draw.flip:
        rgb, depth, mask = rgb[:, ::-1], depth[:, ::-1], mask[:, ::-1]
        k = CameraIntrinsics(k.fx, k.fy, sample.shape[1] - 1 - k.cx, k.cy)
    return RgbdSample(np.ascontiguousarray(rgb), np.ascontiguousarray(depth), np.ascontiguousarray(mask),
                      k, sample.id)


def augment_sample(sample: RgbdSample, cfg: AugmentConfig, rng: np.random.Generator) -> RgbdSample:
    draw = draw_augmentation(cfg, rng)
    if not cfg.enabled:
        return sample
    return apply_augmentation(sample, draw)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 3
    epochs: int = 20
    steps: Optional[int] = None
    dfe_lr_init: float = 1e-5
    dfe_lr_end: float = 1e-7
    dmg_lr_init: float = 1e-4
    dmg_lr_end: float = 1e-6
    power: float = 1.0
    lr_scale: float = 1.0
    decay_epochs: float = 16
    decay_steps: Optional[int] = None
    freeze_first_two_stages: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    deterministic: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.dfe_lr_init < self.dmg_lr_init:
            raise ConfigError("the feature-extractor learning rate must stay below the generator's")
        if not self.lr_scale >= 0:
            raise ConfigError(f"lr_scale must be non-negative, got {self.lr_scale}")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be non-negative")
        return self

    def steps_per_epoch(self, n_samples: int) -> float:
        return n_samples / self.batch_size

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return int(math.ceil(self.epochs * self.steps_per_epoch(n_samples)))

    def resolved_decay_steps(self, n_samples: int) -> int:
        if self.decay_steps is not None:
            return self.decay_steps
        return max(1, int(round(self.decay_epochs * self.steps_per_epoch(n_samples))))

    def schedules(self, n_samples: int) -> Dict[str, LrSchedule]:
        d = self.resolved_decay_steps(n_samples)
        return {
            "dfe": LrSchedule(self.dfe_lr_init, self.dfe_lr_end, d, self.power),
            "dmg": LrSchedule(self.dmg_lr_init, self.dmg_lr_end, d, self.power),
        }


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def batch_arrays(samples: Sequence[RgbdSample], dtype):
    images = np.stack([s.image_chw() for s in samples]).astype(dtype)
    depth = np.stack([s.depth for s in samples])[:, None].astype(dtype)
    mask = np.stack([s.mask for s in samples])[:, None]
    return images, depth, mask


class Trainer:
    """Owns the optimiser state, the seeded sample stream and the loss history.

    Per step: take the next ``batch_size`` indices from a shuffled stream
    (reshuffled with the run generator whenever exhausted), augment each
    sample (brightness, contrast, flip draws), forward, loss at ground-truth
    resolution, backward, one Adam update with per-group learning rates.
    """

    def __init__(self, net: DepthNet, dataset: Sequence[RgbdSample], cfg: TrainConfig,
                 augment: Optional[AugmentConfig] = None, callbacks: Sequence[Callable] = (),
                 checkpoint_path=None, dump_path=None):
        if not dataset:
            raise DataError("training dataset is empty")
        shapes = {s.shape for s in dataset}
        if len(shapes) != 1:
            raise DataError(f"training samples have inconsistent shapes: {sorted(shapes)}")
        self.net = net
        self.dataset = list(dataset)
        self.cfg = cfg.validate()
        self.augment = (augment or AugmentConfig()).validate()
        self.callbacks = list(callbacks)
        self.checkpoint_path = checkpoint_path
        self.dump_path = dump_path
        self.schedules = cfg.schedules(len(self.dataset))
        self.optimizer = Adam(net.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.order = np.zeros(0, dtype=np.int64)
        self.cursor = 0
        self.history: List[float] = []

    def learning_rates(self, step: Optional[int] = None) -> Dict[str, float]:
        step = self.step_count if step is None else step
        return {g: self.cfg.lr_scale * s(step) for g, s in self.schedules.items()}

    def next_indices(self) -> List[int]:
        out = []
        for _ in range(self.cfg.batch_size):
            if self.cursor >= len(self.order):
                self.order = self.rng.permutation(len(self.dataset))
                self.cursor = 0
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out

    def step(self) -> float:
        idx = self.next_indices()
        batch = [augment_sample(self.dataset[i], self.augment, self.rng) for i in idx]
        params = self.net.params
        images, depth, mask = batch_arrays(batch, params.dtype)
        params.zero_grad()
        pred = self.net(Tensor(images))
        pred = bilinear_resize(pred, depth.shape[2], depth.shape[3])
        loss = log_l1_loss(pred, depth, mask)
        value = float(loss.item())
        if not math.isfinite(value):
            dump = self._dump_state()
            raise TrainingDiverged(f"non-finite loss {value} at step {self.step_count} (batch {idx})", dump)
        backward(loss)
        self.optimizer.step(params.grad_map(), self.learning_rates(), self.step_count + 1)
        self.step_count += 1
        self.history.append(value)
        for cb in self.callbacks:
            cb(self, value)
        if self.checkpoint_path and self.cfg.checkpoint_every and self.step_count % self.cfg.checkpoint_every == 0:
            self.save(self.checkpoint_path)
        return value

    def run(self, n_steps: Optional[int] = None) -> List[float]:
        if n_steps is None:
            n_steps = self.cfg.total_steps(len(self.dataset)) - self.step_count
        start = len(self.history)
        for _ in range(max(0, n_steps)):
            self.step()
        return self.history[start:]

    def _dump_state(self):
        if not self.dump_path:
            return None
        try:
            self.save(self.dump_path)
        except Exception:  # diagnostic path must not mask the divergence
            logger.exception("failed to write diagnostic dump")
            return None
        return self.dump_path

    # -- persistence ---------------------------------------------------------

    def rng_blob(self) -> bytes:
        state = {
            "bit_generator": self.rng.bit_generator.state,
            "order": [int(i) for i in self.order],
            "cursor": self.cursor,
            "history": self.history,
        }
        return json.dumps(state).encode("utf-8")

    def restore_rng_blob(self, blob: bytes):
        state = json.loads(blob.decode("utf-8"))
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state["bit_generator"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.cursor = int(state["cursor"])
        self.history = [float(v) for v in state.get("history", [])]

    def save(self, path):
        from .checkpoint import save_checkpoint

        save_checkpoint(path, self.net.params, self.step_count, self.rng_blob(), self.optimizer.moments)

    def restore(self, path):
        from .checkpoint import load_checkpoint

        ckpt = load_checkpoint(path)
        ckpt.apply_to(self.net.params)
        self.step_count = ckpt.step
        self.optimizer.moments = {n: [m.copy(), v.copy()] for n, (m, v) in ckpt.moments.items()}
        self.restore_rng_blob(ckpt.rng_state)
        return self


@dataclass
class TrainResult:
    net: DepthNet
    history: List[float] = field(default_factory=list)
    trainer: Optional[Trainer] = None


def train(dataset, net: DepthNet, cfg: TrainConfig, augment: Optional[AugmentConfig] = None,
          callbacks: Sequence[Callable] = (), checkpoint_path=None, resume_from=None,
          n_steps: Optional[int] = None) -> TrainResult:
    trainer = Trainer(net, dataset, cfg, augment, callbacks, checkpoint_path)
    if resume_from is not None:
        trainer.restore(resume_from)
    trainer.run(n_steps)
    if checkpoint_path:
        trainer.save(checkpoint_path)
    return TrainResult(net, trainer.history, trainer)
