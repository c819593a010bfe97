"""Module containers, parameter initialisers and the common layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor, as_tensor


class Module:
    """Base class with parameter discovery by attribute traversal.

    Attributes holding a gradient-requiring :class:`Tensor` are parameters,
    other tensors are buffers (e.g. batch-norm running statistics). Child
    modules and lists of modules are visited in attribute order, which makes
    the naming and ordering deterministic.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_tensors(full + ".")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if not t.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> Module:
        """Cast every parameter and buffer in place (fp64 is for gradient checks)."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as in_features×out_features."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float = 0.02):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = param(trunc_normal(rng, (in_features, out_features), std))
        self.bias = param(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear: expected last axis {self.in_features}, got shape {x.shape}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.in_features)
        y = flat @ self.weight + self.bias
        return y if x.ndim == 2 else y.reshape(*lead, self.out_features)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = F.LN_EPS):
        self.eps = eps
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        self.momentum = momentum
        self.eps = eps
        self.gain = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels, dtype=np.float32))
        self.running_var = Tensor(np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.gain, self.bias, self.running_mean.data, self.running_var.data,
                              self.training, self.momentum, self.eps)
