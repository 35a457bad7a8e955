"""``key=value`` run configuration files.

Lines are ``key = value``; ``#`` starts a comment. Every key is optional and
falls back to the training defaults (batch 3, DFE lr 1e-5 -> 1e-7, DMG lr
1e-4 -> 1e-6, linear decay over 16 epochs, flip probability 0.5, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .data import CameraIntrinsics, SynthSceneConfig
from .errors import ConfigError, ParseError
from .network import NetworkConfig
from .trainer import AugmentConfig, TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text, 10)


def _positive_int(text: str) -> int:
    v = _int(text)
    if v < 1:
        raise ValueError(f"must be a positive integer, got {v}")
    return v


def _int_list(text: str):
    return tuple(_positive_int(t.strip()) for t in text.split(",") if t.strip())


def _opt_int(text: str):
    return None if text.lower() in ("", "none", "auto") else _int(text)


# key -> (section, attribute, parser)
KEYS = {
    "preset": ("network", "preset", str),
    "stem_channels": ("network", "stem_channels", _positive_int),
    "stage_channels": ("network", "stage_channels", _int_list),
    "stage_block_counts": ("network", "stage_block_counts", _int_list),
    "reduced_channels": ("network", "reduced_channels", _positive_int),
    "attention_ratio": ("network", "attention_ratio", _positive_int),
    "bn_eps": ("network", "bn_eps", float),
    "batch_size": ("train", "batch_size", _positive_int),
    "epochs": ("train", "epochs", _positive_int),
    "steps": ("train", "steps", _opt_int),
    "dfe_lr_init": ("train", "dfe_lr_init", float),
    "dfe_lr_end": ("train", "dfe_lr_end", float),
    "dmg_lr_init": ("train", "dmg_lr_init", float),
    "dmg_lr_end": ("train", "dmg_lr_end", float),
    "power": ("train", "power", float),
    "lr_scale": ("train", "lr_scale", float),
    "decay_epochs": ("train", "decay_epochs", float),
    "decay_steps": ("train", "decay_steps", _opt_int),
    "freeze_first_two_stages": ("train", "freeze_first_two_stages", _bool),
    "seed": ("train", "seed", _int),
    "adam_beta1": ("train", "beta1", float),
    "adam_beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "checkpoint_every": ("train", "checkpoint_every", _int),
    "deterministic": ("train", "deterministic", _bool),
    "augment": ("augment", "enabled", _bool),
    "brightness_delta_min": ("augment", "brightness_lo", float),
    "brightness_delta_max": ("augment", "brightness_hi", float),
    "contrast_factor_min": ("augment", "contrast_lo", float),
    "contrast_factor_max": ("augment", "contrast_hi", float),
    "flip_probability": ("augment", "flip_probability", float),
    "synth_count": ("synth", "count", _positive_int),
    "synth_height": ("synth", "height", _positive_int),
    "synth_width": ("synth", "width", _positive_int),
    "synth_d_min": ("synth", "d_min", float),
    "synth_d_max": ("synth", "d_max", float),
    "synth_objects_min": ("synth", "objects_lo", _int),
    "synth_objects_max": ("synth", "objects_hi", _int),
    "synth_texture": ("synth", "texture", str),
    "data_dir": ("paths", "data_dir", str),
    "eval_dir": ("paths", "eval_dir", str),
    "checkpoint": ("paths", "checkpoint", str),
    "output_dir": ("paths", "output_dir", str),
    "nyu_preprocess": ("paths", "nyu_preprocess", _bool),
    "fx": ("camera", "fx", float),
    "fy": ("camera", "fy", float),
    "cx": ("camera", "cx", float),
    "cy": ("camera", "cy", float),
}


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    augment: AugmentConfig
    synth: SynthSceneConfig
    synth_count: int = 8
    paths: Dict[str, object] = field(default_factory=dict)
    camera: Optional[CameraIntrinsics] = None
    network_overrides: Dict[str, object] = field(default_factory=dict)

    def with_preset(self, preset: str) -> "RunConfig":
        """Rebuild the network config from another preset, keeping explicit overrides."""
        self.network = NetworkConfig.from_preset(preset, **self.network_overrides)
        return self


def parse_config_text(text: str, path: Optional[str] = None) -> RunConfig:
    found: Dict[str, Dict[str, object]] = {s: {} for s in ("network", "train", "augment", "synth", "paths", "camera")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ParseError(f"unknown key {key!r}", path, lineno)
        section, attr, conv = KEYS[key]
        try:
            found[section][attr] = conv(value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {value!r} ({exc})", path, lineno) from None

    def build(section, fn):
        try:
            return fn()
        except (ConfigError, TypeError) as exc:
            raise ParseError(f"invalid {section} settings: {exc}", path) from None

    net_kw = dict(found["network"])
    preset = net_kw.pop("preset", "toy")
    network = build("network", lambda: NetworkConfig.from_preset(preset, **net_kw))

    train = build("train", lambda: TrainConfig(**found["train"]).validate())

    a = found["augment"]
    augment = build("augment", lambda: AugmentConfig(
        brightness_delta_range=(a.get("brightness_lo", -0.2), a.get("brightness_hi", 0.2)),
        contrast_factor_range=(a.get("contrast_lo", 0.8), a.get("contrast_hi", 1.2)),
        flip_probability=a.get("flip_probability", 0.5),
        enabled=a.get("enabled", True),
    ).validate())

    s = dict(found["synth"])
    count = s.pop("count", 8)
    objects = (s.pop("objects_lo", 2), s.pop("objects_hi", 5))
    synth = build("synth", lambda: SynthSceneConfig(seed=train.seed, objects=objects, **s).validate())

    cam = found["camera"]
    camera = None
    if cam:
        missing = [k for k in ("fx", "fy", "cx", "cy") if k not in cam]
        if missing:
            raise ParseError(f"incomplete camera intrinsics, missing {', '.join(missing)}", path)
        camera = build("camera", lambda: CameraIntrinsics(**cam))

    return RunConfig(network, train, augment, synth, count, found["paths"], camera, net_kw)


def parse_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", str(p)) from None
    return parse_config_text(text, str(p))
