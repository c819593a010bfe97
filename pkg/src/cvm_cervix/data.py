"""Dataset indexing, stratified splitting, preprocessing and augmentation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ContractError, DataError
from .tensor import TENSOR_MAGIC, Tensor, dump_tensor, load_tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".nptensor"}
SPLITS = ("train", "val", "test")
TRANSFORMS = ("identity", "rot180", "fliplr", "flipud")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ImageBuffer:
    """An 8-bit RGB image stored row-major as H×W×3."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"image must be H×W×3, got shape {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Sample:
    ref: str | ImageBuffer
    label: int
    split: str | None = None
    transform: str = "identity"


@dataclass
class DatasetIndex:
    samples: list[Sample]
    class_names: list[str]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def subset(self, split: str) -> DatasetIndex:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return replace(self, samples=[s for s in self.samples if s.split == split])

    def split_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(SPLITS, 0)
        for s in self.samples:
            if s.split in counts:
                counts[s.split] += 1
        return counts


# ---------------------------------------------------------------------------
# Scanning and splitting
# ---------------------------------------------------------------------------

def _readable(path: Path) -> bool:
    try:
        if path.suffix.lower() == ".nptensor":
            with open(path, "rb") as fh:
                return fh.read(4) == TENSOR_MAGIC
        with Image.open(path) as im:
            im.size  # header parse only
        return True
    except (OSError, UnidentifiedImageError):
        return False


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Index ``root/<class_name>/<image>`` in lexicographic class and file order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        kept = 0
        for path in files:
            if not _readable(path):
                log.warning("skipping unreadable image %s", path)
                continue
            samples.append(Sample(str(path), label))
            kept += 1
        if kept == 0:
            log.warning("class directory %s has no readable images", cdir)
        log.info("class %d %s: %d images", label, cdir.name, kept)
    return DatasetIndex(samples, [p.name for p in class_dirs], root)


def split_sizes(n: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Per-class (train, val, test) counts.

    Test takes floor(n·r_test), validation takes n·r_val rounded half-up and
    training keeps the rest, so validation and test stay within one image of 20% each.
    """
    _check_ratios(ratios)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_val = math.floor(n * ratios[1] + 0.5)
    n_val = min(n_val, n - n_test)
    return n - n_val - n_test, n_val, n_test


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative values summing to 1, got {tuple(ratios)}")


def split(index: DatasetIndex, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> DatasetIndex:
    """Stratified seeded split; returns a new index with every sample labelled."""
    _check_ratios(ratios)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(index.num_classes)}
    for i, s in enumerate(index.samples):
        by_class[s.label].append(i)
    assignment: dict[int, str] = {}
    for c in range(index.num_classes):
        members = by_class[c]
        n_train, n_val, _ = split_sizes(len(members), ratios)
        order = rng.permutation(len(members))
        for rank, k in enumerate(order):
            name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignment[members[k]] = name
    samples = [replace(s, split=assignment[i]) for i, s in enumerate(index.samples)]
    return replace(index, samples=samples)


def write_manifest(index: DatasetIndex, path: str | Path) -> None:
    """``relative/path<TAB>class_id<TAB>split`` per line, UTF-8, LF."""
    lines = []
    for s in index.samples:
        if isinstance(s.ref, ImageBuffer) or s.split is None:
            raise ContractError("manifest export needs file-backed samples with split labels")
        rel = Path(s.ref).relative_to(index.root) if index.root else Path(s.ref)
        lines.append(f"{rel.as_posix()}\t{s.label}\t{s.split}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_manifest(path: str | Path, root: str | Path, class_names: list[str]) -> DatasetIndex:
    root = Path(root)
    samples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            rel, label, which = line.split("\t")
            label = int(label)
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed manifest line") from None
        if which not in SPLITS or not 0 <= label < len(class_names):
            raise DataError(f"{path}:{lineno}: bad split or class id")
        samples.append(Sample(str(root / rel), label, which))
    return DatasetIndex(samples, list(class_names), root)


# ---------------------------------------------------------------------------
# Image operations
# ---------------------------------------------------------------------------

def load_image(ref: str | Path | ImageBuffer) -> ImageBuffer:
    if isinstance(ref, ImageBuffer):
        return ref
    path = Path(ref)
    try:
        if path.suffix.lower() == ".nptensor":
            arr = load_tensor(path).data
            return ImageBuffer(np.clip(np.rint(arr), 0, 255).astype(np.uint8))
        with Image.open(path) as im:
            return ImageBuffer(np.asarray(im.convert("RGB")))
    except (OSError, ValueError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def save_image(img: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".nptensor":
        dump_tensor(img.pixels.astype(np.float32), path)
    else:
        Image.fromarray(img.pixels).save(path)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: ImageBuffer, target: int) -> ImageBuffer:
    """Bilinear stretch to target×target using pixel-centre alignment."""
    if target < 1:
        raise ConfigError(f"resize target must be >= 1, got {target}")
    if img.height == target and img.width == target:
        return ImageBuffer(img.pixels.copy())
    px = img.pixels.astype(np.float64)
    r0, r1, fr = _bilinear_axis(img.height, target)
    c0, c1, fc = _bilinear_axis(img.width, target)
    fr, fc = fr[:, None, None], fc[None, :, None]
    top = px[r0][:, c0] * (1 - fc) + px[r0][:, c1] * fc
    bottom = px[r1][:, c0] * (1 - fc) + px[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def flip_lr(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def flip_ud(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[::-1].copy())


def rot180(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[::-1, ::-1].copy())


_TRANSFORM_FNS = {"identity": lambda im: im, "rot180": rot180, "fliplr": flip_lr, "flipud": flip_ud}


def apply_transform(img: ImageBuffer, name: str) -> ImageBuffer:
    try:
        return _TRANSFORM_FNS[name](img)
    except KeyError:
        raise ConfigError(f"unknown transform {name!r}") from None


def random_hflip(img: ImageBuffer, rng: np.random.Generator) -> ImageBuffer:
    """Mirror columns with probability 0.5."""
    return flip_lr(img) if rng.random() < 0.5 else img


def normalize(img: ImageBuffer, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> Tensor:
    """u8 H×W×3 -> fp32 3×H×W with per-channel ``(v/255 - mean) / std``."""
    mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    chw = img.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return Tensor(((chw - mean) / std).astype(np.float32))


def augment4x(samples: Iterable[Sample] | DatasetIndex) -> list[Sample]:
    """Expand each training sample into original, rot180, flipLR and flipUD views."""
    items = samples.samples if isinstance(samples, DatasetIndex) else list(samples)
    out = []
    for s in items:
        if s.split != "train":
            raise ContractError(f"augment4x applies to the train split only; got a {s.split!r} sample")
        if s.transform != "identity":
            raise ContractError("augment4x input is already augmented")
        out.extend(replace(s, transform=t) for t in TRANSFORMS)
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Preprocessor:
    """Decode, transform, resize, optionally flip, then normalize."""

    image_size: int
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    random_flip: bool = False
    cache: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def prepared(self, sample: Sample) -> ImageBuffer:
        key = (sample.ref if isinstance(sample.ref, str) else id(sample.ref), sample.transform)
        if self.cache and key in self._cache:
            return self._cache[key]
        img = resize(apply_transform(load_image(sample.ref), sample.transform), self.image_size)
        if self.cache:
            self._cache[key] = img
        return img

    def __call__(self, sample: Sample, flip: bool = False) -> np.ndarray:
        img = self.prepared(sample)
        if flip:
            img = flip_lr(img)
        return normalize(img, self.mean, self.std).data


def batch_iterator(
    samples: Sequence[Sample] | DatasetIndex,
    batch_size: int,
    preprocessor: Preprocessor,
    shuffle_seed: int | None = None,
    epoch: int = 0,
    workers: int = 0,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (B×3×S×S images, labels) batches; the last batch may be short.

    Shuffling and random flips are drawn from a generator seeded by
    ``(shuffle_seed, epoch)``, so each epoch is reproducible. Decoding may use
    a thread pool; batches come out in the same order either way.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    items = samples.samples if isinstance(samples, DatasetIndex) else list(samples)
    rng = np.random.default_rng([shuffle_seed if shuffle_seed is not None else 0, epoch])
    order = rng.permutation(len(items)) if shuffle_seed is not None else np.arange(len(items))
    flips = rng.random(len(items)) < 0.5 if preprocessor.random_flip else np.zeros(len(items), bool)

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for lo in range(0, len(items), batch_size):
            idx = order[lo:lo + batch_size]
            jobs = [(items[i], bool(flips[k])) for k, i in zip(range(lo, lo + len(idx)), idx)]
            if pool is None:
                arrays = [preprocessor(s, f) for s, f in jobs]
            else:
                arrays = list(pool.map(lambda job: preprocessor(*job), jobs))
            labels = np.array([items[i].label for i in idx], dtype=np.int64)
            yield Tensor(np.stack(arrays)), labels
    finally:
        if pool is not None:
            pool.shutdown()


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_SYNTH_COLORS = np.array([[220, 60, 40], [40, 80, 220], [60, 200, 70], [230, 200, 40],
                          [170, 60, 200], [40, 200, 200]], dtype=np.float64)


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> ImageBuffer:
    """A linear colour ramp whose hue and direction depend on ``label``."""
    color = _SYNTH_COLORS[label % len(_SYNTH_COLORS)]
    angle = math.pi * label / 2.0
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = math.cos(angle) * xx + math.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    px = color * (0.3 + 0.7 * ramp[..., None]) + rng.normal(0, 12, (size, size, 3))
    return ImageBuffer(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def make_synthetic_dataset(root: str | Path, num_classes: int = 2, per_class: int = 20,
                           size: int = 32, seed: int = 0) -> Path:
    """Write ``root/class_<k>/img_<i>.png`` files; returns ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        cdir = root / f"class_{c}"
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            save_image(synthetic_image(c, size, rng), cdir / f"img_{i:03d}.png")
    return root
