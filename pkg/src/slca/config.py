"""Configuration documents for models, training and CLI runs.

All models forbid unknown keys, so a JSON config with a typo is rejected
before any work starts.
"""
from __future__ import annotations

import math
import os
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

TAP_NAMES = ("pe", "t_first", "t_mid", "t_last", "neck")
VARIANTS = ("baseline", "add_no_attention", "sigmoid_only", "slca", "slca_projector")

Variant = Literal["baseline", "add_no_attention", "sigmoid_only", "slca", "slca_projector"]
TapName = Literal["pe", "t_first", "t_mid", "t_last", "neck"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderConfig(_Strict):
    input_size: int = Field(64, ge=1)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(32, ge=1)
    num_blocks: int = Field(4, ge=2)
    num_heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    neck_out_dim: int | None = Field(None, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self):
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self

    @classmethod
    def full_scale(cls, **overrides) -> "EncoderConfig":
        """The full-size geometry: 1024 px input, 16 px patches, 256 channels, 32 blocks."""
        base = dict(input_size=1024, patch_size=16, embed_dim=256, num_blocks=32, num_heads=16)
        return cls(**{**base, **overrides})

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def neck_channels(self) -> int:
        return self.neck_out_dim or self.embed_dim

    @property
    def tap_blocks(self) -> tuple[int, int, int]:
        """1-based indices of the first, middle and last tapped transformer blocks."""
        return 1, math.ceil(self.num_blocks / 2), self.num_blocks

    @property
    def taps_alias(self) -> bool:
        return len(set(self.tap_blocks)) < 3


class SlcaConfig(_Strict):
    r: int = Field(4, ge=1)
    g: int = Field(4, ge=1)
    out_channels: int | None = Field(None, ge=1)

    def hidden(self, c_in: int) -> int:
        return max(1, c_in // self.r)


class BackboneConfig(_Strict):
    stem_channels: int = Field(16, ge=1)
    stage_channels: list[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = Field(2, ge=1)
    input_size: int = Field(64, ge=1)
    num_classes: int = Field(4, ge=2)

    @model_validator(mode="after")
    def _check(self):
        if len(self.stage_channels) != 4:
            raise ValueError("the backbone needs exactly 4 stages (stem + 4 stages = 5 fusion points)")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        return self

    @property
    def injection_sizes(self) -> list[int]:
        """Spatial size after the stem and after each stage (3x3, pad 1, stride 2 each)."""
        sizes, s = [], self.input_size
        for _ in range(1 + len(self.stage_channels)):
            s = (s - 1) // 2 + 1
            sizes.append(s)
        return sizes

    @property
    def injection_channels(self) -> list[int]:
        return [self.stem_channels, *self.stage_channels]

    @property
    def final_size(self) -> int:
        return self.injection_sizes[-1]


class ModelSpec(_Strict):
    variant: Variant = "slca"
    tap_assignment: list[TapName] = Field(default_factory=lambda: list(TAP_NAMES))
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    slca: SlcaConfig = Field(default_factory=SlcaConfig)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if len(self.tap_assignment) != 5:
            raise ValueError("tap_assignment needs one tap per fusion point (5)")
        if self.encoder.input_size != self.backbone.input_size:
            raise ValueError("encoder and backbone input sizes differ")
        return self

    def with_(self, **changes) -> "ModelSpec":
        return self.model_copy(update=changes)


PRESET_EPOCHS = {"desk": 30, "retina-preset": 100, "isic-preset": 400}


class HyperParams(_Strict):
    lr: float = Field(1e-4, ge=0)
    weight_decay: float = Field(0.005, ge=0)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=2)
    eval_every: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    augment: bool = True

    @classmethod
    def preset(cls, name: str, **overrides) -> "HyperParams":
        if name not in PRESET_EPOCHS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_EPOCHS)}")
        return cls(**{"epochs": PRESET_EPOCHS[name], **overrides})


def default_out_dir() -> str:
    return os.environ.get("SLCA_OUT_DIR", "runs")


class RunConfig(_Strict):
    model: ModelSpec = Field(default_factory=ModelSpec)
    hyper: HyperParams = Field(default_factory=HyperParams)
    dataset: str
    out_dir: str = Field(default_factory=default_out_dir)
    fraction: float = Field(1.0, gt=0, le=1)
    train_count: int | None = Field(None, ge=1)
    split_seed: int = Field(0, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    fractions: list[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0], min_length=1)

    @model_validator(mode="after")
    def _check(self):
        if any(not 0 < p <= 1 for p in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        return self


def config_schema() -> dict:
    """JSON schema of the run configuration document."""
    return RunConfig.model_json_schema()
