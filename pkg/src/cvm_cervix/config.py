"""Architecture configuration with ``paper`` and ``desk`` presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


@dataclass
class CnnConfig:
    input_channels: int = 3
    stem_channels: int = 16
    block_channel_ladder: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 1
    out_dim: int = 128
    stem_stride: int = 1
    # stride of the first block in each stage; defaults to 2 everywhere
    stage_strides: tuple[int, ...] | None = None

    def strides(self) -> tuple[int, ...]:
        if self.stage_strides is None:
            return (2,) * len(self.block_channel_ladder)
        return tuple(self.stage_strides)

    def validate(self) -> None:
        if not self.block_channel_ladder:
            raise ConfigError("cnn: block_channel_ladder must be nonempty")
        channels = (self.input_channels, self.stem_channels, *self.block_channel_ladder)
        if any(c <= 0 for c in channels):
            raise ConfigError(f"cnn: channel counts must be positive, got {channels}")
        if self.blocks_per_stage < 1 or self.stem_stride < 1:
            raise ConfigError("cnn: blocks_per_stage and stem_stride must be >= 1")
        if len(self.strides()) != len(self.block_channel_ladder) or min(self.strides()) < 1:
            raise ConfigError("cnn: stage_strides must give one stride >= 1 per ladder entry")
        if self.out_dim != self.block_channel_ladder[-1]:
            raise ConfigError(f"cnn: out_dim {self.out_dim} != last ladder entry {self.block_channel_ladder[-1]}")


@dataclass
class VtConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 4.0
    in_channels: int = 3

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def validate(self) -> None:
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads, self.in_channels) < 1:
            raise ConfigError("vt: sizes must be positive")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ConfigError("vt: depth must be >= 0 and mlp_ratio > 0")
        if self.image_size % self.patch_size:
            raise ConfigError(f"vt: image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"vt: embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


@dataclass
class FusionConfig:
    d_local: int = 128
    d_global: int = 32
    hidden_dim: int | None = None
    num_classes: int = 2

    @property
    def fused_dim(self) -> int:
        return self.d_local + self.d_global

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.fused_dim // 2

    def validate(self) -> None:
        if self.d_local < 0 or self.d_global < 0 or self.fused_dim < 1:
            raise ConfigError("head: feature widths must be nonnegative with a positive sum")
        if self.hidden < 1:
            raise ConfigError(f"head: hidden width must be positive, got {self.hidden}")
        if self.num_classes < 2:
            raise ConfigError(f"head: num_classes must be >= 2, got {self.num_classes}")


@dataclass
class ModelConfig:
    image_size: int = 32
    num_classes: int = 2
    cnn: CnnConfig = field(default_factory=CnnConfig)
    vt: VtConfig = field(default_factory=VtConfig)
    hidden_dim: int | None = None

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.cnn.out_dim, self.vt.embed_dim, self.hidden_dim, self.num_classes)

    def validate(self) -> None:
        self.cnn.validate()
        self.vt.validate()
        self.fusion.validate()
        if self.vt.image_size != self.image_size:
            raise ConfigError(f"vt.image_size {self.vt.image_size} != image_size {self.image_size}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["cnn"]["block_channel_ladder"] = list(self.cnn.block_channel_ladder)
        if self.cnn.stage_strides is not None:
            d["cnn"]["stage_strides"] = list(self.cnn.stage_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        d = dict(d)
        cnn = _build(CnnConfig, d.pop("cnn", {}), "cnn")
        vt = _build(VtConfig, d.pop("vt", {}), "vt")
        cfg = _build(cls, d, "model")
        cfg.cnn, cfg.vt = cnn, vt
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name: str, num_classes: int | None = None) -> ModelConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        cfg = cls.from_dict(PRESETS[name])
        if num_classes is not None:
            cfg.num_classes = num_classes
            cfg.validate()
        return cfg

    def with_overrides(self, overrides: dict[str, Any]) -> ModelConfig:
        """Return a copy with nested ``overrides`` merged in; unknown keys are errors."""
        merged = self.to_dict()
        for key, value in overrides.items():
            if key in ("cnn", "vt"):
                if not isinstance(value, dict):
                    raise ConfigError(f"model.{key} overrides must be an object")
                merged[key].update(value)
            else:
                merged[key] = value
        if "image_size" in overrides and "image_size" not in overrides.get("vt", {}):
            merged["vt"]["image_size"] = overrides["image_size"]
        return ModelConfig.from_dict(merged)


def _build(kind, values: dict[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(kind)} - {"cnn", "vt"}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return kind(**values)


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "image_size": 32,
        "num_classes": 2,
        "cnn": {"stem_channels": 16, "block_channel_ladder": [32, 64, 128], "blocks_per_stage": 1,
                "out_dim": 128, "stem_stride": 1},
        "vt": {"image_size": 32, "patch_size": 8, "embed_dim": 32, "depth": 2, "num_heads": 2,
               "mlp_ratio": 4.0},
    },
    # Xception-like channel plan ending at 2048, DeiT-tiny encoder, 11 classes
    "paper": {
        "image_size": 224,
        "num_classes": 11,
        "cnn": {"stem_channels": 32, "block_channel_ladder": [64, 128, 256, 728, 1024, 1536, 2048],
                "blocks_per_stage": 1, "out_dim": 2048, "stem_stride": 2,
                "stage_strides": [1, 2, 2, 2, 2, 1, 1]},
        "vt": {"image_size": 224, "patch_size": 16, "embed_dim": 192, "depth": 12, "num_heads": 3,
               "mlp_ratio": 4.0},
    },
}
