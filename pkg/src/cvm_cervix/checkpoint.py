"""Checkpoint files and fp16 weight quantization.

Layout: ``b"CVMX"``, u32 format version, u32 header length, UTF-8 JSON
header (config, tensor names/shapes/kinds, precision tag, metadata), then the
little-endian tensor payloads in header order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig
from .errors import ContractError, DataError
from .fusion import CvmCervix

log = logging.getLogger(__name__)

MAGIC = b"CVMX"
FORMAT_VERSION = 1
FP16_MAX = float(np.finfo(np.float16).max)
_DTYPES = {"fp32": np.dtype("<f4"), "fp16": np.dtype("<f2")}


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    kinds: dict[str, str]
    precision: str = "fp32"
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def payload_nbytes(self) -> int:
        return sum(a.nbytes for a in self.tensors.values())

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)


def checkpoint_from_model(model: CvmCervix, meta: dict[str, Any] | None = None) -> Checkpoint:
    tensors, kinds = {}, {}
    for name, t in model.named_tensors():
        tensors[name] = t.data.astype(np.float32, copy=True)
        kinds[name] = "param" if t.requires_grad else "buffer"
    return Checkpoint(model.model_config.to_dict(), tensors, kinds, "fp32", dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint) -> CvmCervix:
    """Rebuild the model in eval mode; fp16 payloads are dequantized to fp32."""
    model = CvmCervix(ckpt.model_config, seed=0)
    model.load_state_dict({k: v.astype(np.float32) for k, v in ckpt.tensors.items()})
    return model.eval()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    dtype = _DTYPES[ckpt.precision]
    header = {
        "precision": ckpt.precision,
        "config": ckpt.config,
        "tensors": [{"name": n, "shape": list(a.shape), "kind": ckpt.kinds[n]} for n, a in ckpt.tensors.items()],
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(blob)))
        fh.write(blob)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        dtype = _DTYPES[header["precision"]]
        entries = [(e["name"], tuple(e["shape"]), e["kind"]) for e in header["tensors"]]
        config, meta = header["config"], header["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from exc
    offset = 12 + hlen
    tensors, kinds = {}, {}
    for name, shape, kind in entries:
        count = int(np.prod(shape))
        if offset + count * dtype.itemsize > len(raw):
            raise DataError(f"{path}: payload truncated at tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        kinds[name] = kind
        offset += count * dtype.itemsize
    if offset != len(raw):
        raise DataError(f"{path}: payload length does not match header")
    return Checkpoint(config, tensors, kinds, header["precision"], meta, version)


def quantize_fp16(ckpt: Checkpoint) -> tuple[Checkpoint, int]:
    """Store every tensor as IEEE half precision (round to nearest even).

    Values beyond the fp16 range saturate to ±65504. Returns the new
    checkpoint and the number of saturated values. fp16 input is returned
    unchanged.
    """
    if ckpt.precision == "fp16":
        return ckpt, 0
    if ckpt.precision != "fp32":
        raise ContractError(f"cannot quantize a {ckpt.precision} checkpoint")
    saturated = 0
    tensors = {}
    for name, arr in ckpt.tensors.items():
        over = np.abs(arr) > FP16_MAX
        saturated += int(over.sum())
        tensors[name] = np.clip(arr, -FP16_MAX, FP16_MAX).astype(np.float16)
    if saturated:
        log.warning("fp16 quantization saturated %d values", saturated)
    return replace(ckpt, tensors=tensors, precision="fp16"), saturated


def dequantize(ckpt: Checkpoint) -> Checkpoint:
    if ckpt.precision == "fp32":
        return ckpt
    return replace(ckpt, tensors={k: v.astype(np.float32) for k, v in ckpt.tensors.items()}, precision="fp32")
