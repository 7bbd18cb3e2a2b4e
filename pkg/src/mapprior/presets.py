"""Grid and architecture presets.

``toy`` is the desk-scale configuration used by the tests and the CLI
defaults. ``paper`` is the full-size configuration (6x200x200
layouts, 12x12 latent grid, 1024 codes of width 256, 24-layer transformer).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from mapprior.exceptions import ConfigurationError

DEFAULT_CLASSES = ("drivable", "ped_crossing", "walkway", "stop_line", "carpark", "divider")


@dataclass(frozen=True)
class PriorArch:
    in_channels: int = 6
    height: int = 64
    width: int = 64
    # (out_channels, n_resnet_blocks, downsample_after)
    enc_levels: tuple = ((32, 1, True), (64, 1, True), (128, 1, True))
    dec_in_channels: int = 128
    # (out_channels, n_resnet_blocks, upsample_mode or None)
    dec_levels: tuple = ((128, 1, "nearest"), (64, 1, "nearest"), (32, 1, "nearest"))
    embed_dim: int = 64
    n_codes: int = 256
    latent_height: int = 8
    latent_width: int = 8
    norm_groups: int = 32
    disc_channels: int = 32


@dataclass(frozen=True)
class SamplerArch:
    n_codes: int = 256
    latent_height: int = 8
    latent_width: int = 8
    feature_channels: int = 8
    feature_height: int = 64
    feature_width: int = 64
    n_layer: int = 4
    n_head: int = 4
    n_embd: int = 128
    # (out_channels, n_resnet_blocks, downsample_after) for the sensor feature CNN
    feat_levels: tuple = ((16, 0, True), (32, 1, True), (64, 1, True))
    norm_groups: int = 16
    dropout: float = 0.0
    use_features: bool = True
    one_step: bool = True
    # add each slot's own guidance embedding and feature token to its target input
    slot_conditioning: bool = True
    # 0 sizes the positional table to exactly fit the sequence
    context_length: int = 0

    def __post_init__(self):
        needed = self.n_feature_tokens + 2 * self.n_target
        if self.context_length and self.context_length < needed:
            raise ConfigurationError(f"context_length {self.context_length} < required {needed}")

    @property
    def n_target(self) -> int:
        return self.latent_height * self.latent_width

    @property
    def n_feature_tokens(self) -> int:
        return self.n_target if self.use_features else 0

    @property
    def block_size(self) -> int:
        return max(self.context_length, self.n_feature_tokens + 2 * self.n_target)


@dataclass(frozen=True)
class Preset:
    name: str
    classes: tuple
    height: int
    width: int
    resolution: float
    prior: PriorArch
    sampler: SamplerArch
    # default learning rates for prior / sampler training
    prior_lr: float = 4.5e-4
    sampler_lr: float = 3e-4
    extra: dict = field(default_factory=dict)

    @property
    def n_channels(self) -> int:
        return len(self.classes)


TOY = Preset(
    name="toy",
    classes=DEFAULT_CLASSES,
    height=64,
    width=64,
    resolution=1.5625,
    prior=PriorArch(),
    sampler=SamplerArch(),
)

PAPER = Preset(
    name="paper",
    classes=DEFAULT_CLASSES,
    height=200,
    width=200,
    resolution=0.5,
    prior=PriorArch(
        in_channels=6,
        height=200,
        width=200,
        enc_levels=((128, 2, True), (128, 2, True), (256, 2, True), (256, 2, True), (512, 2, False)),
        dec_in_channels=512,
        dec_levels=(
            (256, 3, None),
            (256, 3, "nearest"),
            (256, 3, "nearest"),
            (128, 3, "nearest"),
            (128, 3, "convT"),
        ),
        embed_dim=256,
        n_codes=1024,
        latent_height=12,
        latent_width=12,
        norm_groups=32,
        disc_channels=64,
    ),
    sampler=SamplerArch(
        n_codes=1024,
        latent_height=12,
        latent_width=12,
        feature_channels=8,
        feature_height=200,
        feature_width=200,
        n_layer=24,
        n_head=16,
        n_embd=1024,
        feat_levels=((128, 2, True), (128, 2, True), (256, 2, True), (512, 2, True)),
        norm_groups=32,
        context_length=512,
        slot_conditioning=False,
    ),
    prior_lr=9.0e-6,
    sampler_lr=9.0e-6,
)

PRESETS = {"toy": TOY, "paper": PAPER}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def arch_dict(arch) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(arch)))


def config_hash(obj) -> str:
    """Stable sha256 over a dataclass or JSON-compatible mapping."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(payload.encode()).hexdigest()
