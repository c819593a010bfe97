"""Serial feature fusion, the GELU MLP head and the assembled hybrid model."""

from __future__ import annotations

import numpy as np

from . import functional as F
from . import tensor as T
from .cnn import CnnExtractor
from .config import FusionConfig, ModelConfig
from .errors import DimensionError
from .nn import Linear, Module
from .tensor import Tensor, as_tensor
from .vit import VtExtractor


def fuse(local: Tensor, global_: Tensor) -> Tensor:
    """Concatenate B×m local and B×n global features into B×(m+n)."""
    local, global_ = as_tensor(local), as_tensor(global_)
    if local.ndim != 2 or global_.ndim != 2 or local.shape[0] != global_.shape[0]:
        raise DimensionError(f"fuse: batch mismatch between {local.shape} and {global_.shape}")
    return T.concat([local, global_], axis=1)


class FusionHead(Module):
    """linear(m+n -> hidden) -> GELU -> linear(hidden -> C), raw logits out."""

    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.fc1 = Linear(config.fused_dim, config.hidden, rng)
        self.fc2 = Linear(config.hidden, config.num_classes, rng)

    def forward(self, fused: Tensor) -> Tensor:
        fused = as_tensor(fused)
        if fused.ndim != 2 or fused.shape[1] != self.config.fused_dim:
            raise DimensionError(f"classify: expected width {self.config.fused_dim}, got shape {fused.shape}")
        return self.fc2(F.gelu(self.fc1(fused)))


def classify(fused: Tensor, head: FusionHead) -> Tensor:
    return head(fused)


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1)


class CvmCervix(Module):
    """CNN and VT extractors in parallel, fused serially, classified by the MLP head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.model_config = config
        cnn_seed, vt_seed, head_seed = np.random.SeedSequence(seed).spawn(3)
        self.cnn = CnnExtractor(config.cnn, np.random.default_rng(cnn_seed), config.image_size)
        self.vt = VtExtractor(config.vt, np.random.default_rng(vt_seed))
        self.head = FusionHead(config.fusion, np.random.default_rng(head_seed))

    def features(self, images: Tensor) -> Tensor:
        return fuse(self.cnn(images), self.vt(images))

    def forward(self, images: Tensor) -> Tensor:
        return self.head(self.features(images))


def build_model(config: ModelConfig, seed: int = 0) -> CvmCervix:
    return CvmCervix(config, seed)
