"""Global-feature extractor: patch embedding plus pre-norm transformer encoder."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from . import tensor as T
from .config import VtConfig
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor, as_tensor


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """B×C×S×S -> B×N×(C·p·p), patches row-major, each flattened channel-major."""
    images = as_tensor(images)
    if images.ndim != 4:
        raise DimensionError(f"patchify: expected B×C×S×S, got shape {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise DimensionError(f"patchify: image {h}×{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * p * p)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`patchify` for square images (numpy only)."""
    b, n, _ = patches.shape
    g = math.isqrt(n)
    p = patch_size
    x = patches.reshape(b, g, g, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, g * p, g * p)


def embed(patches: Tensor, projection: Linear, class_token: Tensor, pos_embed: Tensor) -> Tensor:
    """Project patches, prepend the class token and add positional embeddings."""
    patches = as_tensor(patches)
    b, n, _ = patches.shape
    d = projection.out_features
    if pos_embed.shape != (n + 1, d):
        raise DimensionError(f"embed: pos_embed shape {pos_embed.shape} != {(n + 1, d)}")
    tokens = projection(patches)
    cls = T.broadcast_to(class_token.reshape(1, 1, d), (b, 1, d))
    return T.concat([cls, tokens], axis=1) + pos_embed


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if dim % num_heads:
            raise ConfigError(f"attention: dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x: Tensor, return_attention: bool = False):
        b, t, d = x.shape
        h = self.num_heads
        hd = d // h

        def heads(y: Tensor) -> Tensor:
            return y.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd))
        attn = F.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        out = self.out(ctx)
        return (out, attn) if return_attention else out


def mhsa(tokens: Tensor, weights: Attention, num_heads: int | None = None) -> Tensor:
    if num_heads is not None and num_heads != weights.num_heads:
        raise ConfigError(f"mhsa: weights built for {weights.num_heads} heads, asked for {num_heads}")
    return weights(tokens)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-LayerNorm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim: int, num_heads: int, mlp_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def encoder_block(tokens: Tensor, block: EncoderBlock) -> Tensor:
    return block(tokens)


class VtExtractor(Module):
    def __init__(self, config: VtConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.embed_dim
        self.proj = Linear(config.in_channels * config.patch_size ** 2, d, rng)
        self.class_token = param(np.zeros(d))
        self.pos_embed = param(trunc_normal(rng, (config.num_patches + 1, d)))
        self.blocks = [EncoderBlock(d, config.num_heads, config.mlp_dim, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(d)

    @property
    def out_dim(self) -> int:
        return self.config.embed_dim

    def tokens(self, images: Tensor) -> Tensor:
        images = as_tensor(images)
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (self.config.in_channels, s, s):
            raise DimensionError(f"VT expects B×{self.config.in_channels}×{s}×{s} images, got shape {images.shape}")
        x = embed(patchify(images, self.config.patch_size), self.proj, self.class_token, self.pos_embed)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, images: Tensor) -> Tensor:
        return self.tokens(images)[:, 0]


def build_vt(config: VtConfig, init_seed: int) -> VtExtractor:
    return VtExtractor(config, np.random.default_rng(init_seed))


def extract_global_features(model: VtExtractor, images: Tensor) -> Tensor:
    """B×3×S×S images -> B×embed_dim class-token features after the final norm."""
    return model(images)
