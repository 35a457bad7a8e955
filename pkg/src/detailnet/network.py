"""Network assembly: dense feature extractor plus attention-fused depth generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from . import blocks
from .blocks import ParamStore
from .errors import ConfigError, ShapeError
from .tensor import ConvSpec, Tensor, bilinear_resize, bilinear_upsample, conv2d, no_grad, softplus

PRESETS = {
    "toy": dict(
        stem_channels=32,
        stage_channels=(64, 80, 96, 128),
        stage_block_counts=(2, 2, 2, 2),
        reduced_channels=64,
        attention_ratio=4,
    ),
    "full": dict(
        stem_channels=64,
        stage_channels=(256, 512, 1024, 2048),
        stage_block_counts=(3, 4, 23, 3),
        reduced_channels=256,
        attention_ratio=4,
    ),
}


@dataclass
class NetworkConfig:
    stem_channels: int = 32
    stage_channels: Tuple[int, ...] = (64, 80, 96, 128)
    stage_block_counts: Tuple[int, ...] = (2, 2, 2, 2)
    dilation_rates: Tuple[int, ...] = (1, 2, 4, 8)
    reduced_channels: int = 64
    attention_ratio: int = 4
    preset: str = "toy"
    bn_eps: float = 1e-5

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "NetworkConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[name], preset=name)
        values.update(overrides)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_block_counts = tuple(int(c) for c in self.stage_block_counts)
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if self.dilation_rates != blocks.DILATIONS:
            raise ConfigError(f"dilation_rates are fixed to {blocks.DILATIONS}, got {self.dilation_rates}")
        if len(self.stage_channels) != 4 or len(self.stage_block_counts) != 4:
            raise ConfigError("exactly four stages are required")
        if any(b < 1 for b in self.stage_block_counts):
            raise ConfigError(f"every stage needs at least one unit: {self.stage_block_counts}")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing: {self.stage_channels}")
        if self.stem_channels < 1 or self.reduced_channels < 1 or self.attention_ratio < 1:
            raise ConfigError("stem_channels, reduced_channels and attention_ratio must be positive")
        if min(self.stage_channels) < self.reduced_channels:
            raise ConfigError(
                f"reduced_channels={self.reduced_channels} exceeds the narrowest stage ({min(self.stage_channels)})"
            )
        if self.preset not in PRESETS and self.preset != "custom":
            raise ConfigError(f"unknown preset {self.preset!r}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class SideOutputs:
    """Feature maps captured after each Res-Block, all at 1/4 input resolution."""

    maps: List[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ShapeError(f"expected four side outputs, got {len(self.maps)}")
        hw = {m.shape[2:] for m in self.maps}
        if len(hw) != 1:
            raise ShapeError(f"side outputs disagree in spatial size: {sorted(hw)}")

    def __getitem__(self, i):
        return self.maps[i]

    def __iter__(self):
        return iter(self.maps)

    def __len__(self):
        return 4


DFE_PREFIXES = ("stem", "stage1", "stage2", "stage3", "stage4")
FROZEN_PREFIXES = ("stem.", "stage1.")


def build_network(config: NetworkConfig, seed: int = 0, freeze_first_two_stages: bool = True, dtype=None) -> "DepthNet":
    """Create all parameters. DFE convs use He init, DMG convs Xavier, BN is identity and frozen."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    store.bn_eps = config.bn_eps

    blocks.init_stem(store, rng, config.stem_channels)
    in_ch = config.stem_channels
    for s, (ch, n, r) in enumerate(zip(config.stage_channels, config.stage_block_counts, config.dilation_rates), 1):
        blocks.init_resblock(store, rng, f"stage{s}", in_ch, ch, n, r)
        in_ch = ch

    cr = config.reduced_channels
    blocks.init_crb(store, rng, "crb4", config.stage_channels[3], cr, config.dilation_rates[3])
    for s in (3, 2, 1):
        r = config.dilation_rates[s - 1]
        blocks.init_crb(store, rng, f"crb{s}", config.stage_channels[s - 1], cr, r)
        blocks.init_afb(store, rng, f"afb{s}", cr, config.attention_ratio)
        blocks.init_crb(store, rng, f"crb{s}_fused", cr, cr, r)
    blocks.add_conv(store, "head", ConvSpec(1, cr, 3, 3), rng, "dmg", "xavier", bias=True)

    if freeze_first_two_stages:
        for prefix in FROZEN_PREFIXES:
            store.freeze(prefix)
    return DepthNet(config, store)


class DepthNet:
    """Holds a config and its parameters; forward passes are pure functions of both."""

    def __init__(self, config: NetworkConfig, params: ParamStore):
        self.config = config
        self.params = params

    def dfe_forward(self, image: Tensor) -> SideOutputs:
        x = blocks.stem_forward(image, self.params)
        sides = []
        for s, r in enumerate(self.config.dilation_rates, 1):
            x = blocks.resblock_forward(x, self.params, f"stage{s}", r)
            sides.append(x)
        return SideOutputs(sides)

    def dmg_forward(self, sides: SideOutputs) -> Tensor:
        p, rates = self.params, self.config.dilation_rates
        for s, m in enumerate(sides, 1):
            expected = self.config.stage_channels[s - 1]
            if m.shape[1] != expected:
                raise ShapeError(f"side output {s} has {m.shape[1]} channels, expected {expected}")
        solid = blocks.crb_forward(sides[3], p, "crb4", rates[3])
        for s in (3, 2, 1):
            r = rates[s - 1]
            dotted = blocks.crb_forward(sides[s - 1], p, f"crb{s}", r)
            fused = blocks.afb_forward(dotted, solid, p, f"afb{s}")
            solid = blocks.crb_forward(fused, p, f"crb{s}_fused", r)
        depth = softplus(conv2d(solid, p.specs["head"], p["head.weight"], p["head.bias"]))
        return bilinear_upsample(depth, 2)

    def forward(self, image: Tensor) -> Tensor:
        return self.dmg_forward(self.dfe_forward(image))

    __call__ = forward

    def predict(self, image, resize_to_input: bool = False) -> np.ndarray:
        """Depth for an [N,3,H,W] (or [3,H,W]) image; no tape is recorded."""
        arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=self.params.dtype)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        with no_grad():
            depth = self.forward(Tensor(arr))
            if resize_to_input:
                depth = bilinear_resize(depth, arr.shape[2], arr.shape[3])
        out = depth.data
        return out[0] if squeeze else out

    def group_of(self, name: str) -> str:
        return self.params.groups[name]


def predict(image, net: DepthNet, resize_to_input: bool = False) -> np.ndarray:
    return net.predict(image, resize_to_input)
