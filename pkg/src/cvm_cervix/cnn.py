"""Local-feature extractor: a ladder of depthwise-separable residual blocks."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .config import CnnConfig
from .errors import DimensionError
from .nn import BatchNorm2d, Module, kaiming_normal, param
from .tensor import Tensor, as_tensor


class SeparableBlock(Module):
    """``relu(bn(pointwise(depthwise(x)))) + residual(x)``.

    The residual is the identity when shapes allow, otherwise a strided 1×1
    projection followed by batch norm.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.depthwise = param(kaiming_normal(rng, (in_channels, 1, 3, 3), fan_in=9))
        self.pointwise = param(kaiming_normal(rng, (out_channels, in_channels, 1, 1), fan_in=in_channels))
        self.bn = BatchNorm2d(out_channels)
        self.has_projection = in_channels != out_channels or stride != 1
        if self.has_projection:
            self.proj = param(kaiming_normal(rng, (out_channels, in_channels, 1, 1), fan_in=in_channels))
            self.proj_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"SeparableBlock: expected {self.in_channels} input channels, got shape {x.shape}")
        h = F.depthwise_conv2d(x, self.depthwise, stride=self.stride, padding=1)
        h = F.relu(self.bn(F.pointwise_conv2d(h, self.pointwise)))
        if self.has_projection:
            res = self.proj_bn(F.conv2d(x, self.proj, stride=self.stride))
        else:
            res = x
        return h + res


def separable_block_forward(block: SeparableBlock, x: Tensor) -> Tensor:
    return block(x)


class CnnExtractor(Module):
    def __init__(self, config: CnnConfig, rng: np.random.Generator, image_size: int | None = None):
        config.validate()
        self.config = config
        self.image_size = image_size
        c = config.stem_channels
        self.stem = param(kaiming_normal(rng, (c, config.input_channels, 3, 3), fan_in=9 * config.input_channels))
        self.stem_bn = BatchNorm2d(c)
        blocks = []
        for width, stride in zip(config.block_channel_ladder, config.strides()):
            for k in range(config.blocks_per_stage):
                blocks.append(SeparableBlock(c, width, stride if k == 0 else 1, rng))
                c = width
        self.blocks = blocks

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def forward(self, images: Tensor) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != self.config.input_channels:
            raise DimensionError(f"CNN expects B×{self.config.input_channels}×S×S images, got shape {images.shape}")
        s = self.image_size
        if s is not None and images.shape[2:] != (s, s):
            raise DimensionError(f"CNN expects spatial size {s}×{s}, got {images.shape[2]}×{images.shape[3]}")
        x = F.conv2d(images, self.stem, stride=self.config.stem_stride, padding=1)
        x = F.relu(self.stem_bn(x))
        for block in self.blocks:
            x = block(x)
        return F.global_avg_pool(x)


def build_cnn(config: CnnConfig, init_seed: int, image_size: int | None = None) -> CnnExtractor:
    return CnnExtractor(config, np.random.default_rng(init_seed), image_size)


def extract_local_features(model: CnnExtractor, images: Tensor) -> Tensor:
    """B×3×S×S images -> B×out_dim pooled features (no classification layer)."""
    return model(images)
