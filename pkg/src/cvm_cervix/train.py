"""AdamW training loop, evaluation and feature export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model
from .data import Preprocessor, Sample, batch_iterator
from .errors import ContractError, DataError, DimensionError, NumericalError
from .functional import cross_entropy_loss
from .fusion import CvmCervix, predict
from .metrics import ConfusionMatrix, MetricsReport, compute_metrics
from .tensor import GradTape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: int | None = None
    random_hflip: bool = True
    workers: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               cfg: TrainConfig) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if not param.shape == grad.shape == m.shape == v.shape:
        raise DimensionError(f"adamw: shapes differ {param.shape} {grad.shape} {m.shape} {v.shape}")
    if t < 1:
        raise ValueError(f"adamw: step must be >= 1, got {t}")
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    param -= cfg.lr * cfg.weight_decay * param + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            adamw_step(p.data, grads[p], m, v, self.t, self.cfg)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.8g}\t{self.val_accuracy:.6f}"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best: Checkpoint | None = None
    best_epoch: int = -1
    best_val_accuracy: float = -1.0
    steps: int = 0
    losses: list[float] = field(default_factory=list)


def train(
    model: CvmCervix,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig,
    preprocessor: Preprocessor,
    log_path: str | Path | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Jointly train the CNN, VT and head with cross-entropy and AdamW.

    After every epoch the validation accuracy is measured; the checkpoint
    with the highest one is kept in ``result.best``.
    """
    if not train_samples or not val_samples:
        raise ContractError("training needs nonempty train and validation splits")
    train_pre = Preprocessor(preprocessor.image_size, preprocessor.mean, preprocessor.std,
                             random_flip=cfg.random_hflip)
    eval_pre = Preprocessor(preprocessor.image_size, preprocessor.mean, preprocessor.std)
    num_classes = model.model_config.num_classes
    params = model.parameters()
    opt = AdamW(params, cfg)
    result = TrainResult()
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if logf:
            logf.write(f"# train_samples={len(train_samples)} val_samples={len(val_samples)}\n")
        for epoch in range(cfg.epochs):
            model.train()
            total, seen = 0.0, 0
            for bi, (x, y) in enumerate(batch_iterator(train_samples, cfg.batch_size, train_pre,
                                                       shuffle_seed=cfg.seed, epoch=epoch, workers=cfg.workers)):
                with GradTape() as tape:
                    loss = cross_entropy_loss(model(x), y)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
                grads = backward(loss, tape, leaves=params)
                opt.step(grads)
                total += value * len(y)
                seen += len(y)
                result.losses.append(value)
                result.steps += 1
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
            _, report = evaluate(model, val_samples, eval_pre, num_classes, cfg.batch_size)
            rec = EpochRecord(epoch, total / seen, report.accuracy)
            result.history.append(rec)
            log.info("epoch %d loss %.5f val_acc %.4f", epoch, rec.train_loss, rec.val_accuracy)
            if logf:
                logf.write(rec.line() + "\n")
                logf.flush()
            if rec.val_accuracy > result.best_val_accuracy:
                result.best_val_accuracy = rec.val_accuracy
                result.best_epoch = epoch
                info = dict(meta or {}, epoch=epoch, val_accuracy=rec.val_accuracy, step=result.steps)
                result.best = checkpoint_from_model(model, info)
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
    finally:
        if logf:
            logf.close()
        model.eval()
    return result


def _forward_batches(model: CvmCervix, samples: Sequence[Sample], pre: Preprocessor, batch_size: int):
    was_training = model.training
    model.eval()
    try:
        for x, y in batch_iterator(samples, batch_size, pre):
            feats = model.features(x)
            yield feats.data, model.head(feats).data, y
    finally:
        model.train(was_training)


def evaluate(model: CvmCervix, samples: Sequence[Sample], pre: Preprocessor, num_classes: int | None = None,
             batch_size: int = 16) -> tuple[ConfusionMatrix, MetricsReport]:
    """Eval-mode predictions over ``samples`` -> confusion matrix and metrics."""
    if not samples:
        raise ContractError("evaluate needs a nonempty subset")
    cm = ConfusionMatrix.zeros(num_classes or model.model_config.num_classes)
    for _, logits, y in _forward_batches(model, samples, pre, batch_size):
        cm.update(y, predict(logits))
    return cm, compute_metrics(cm)


def export_features(model: CvmCervix, samples: Sequence[Sample], pre: Preprocessor, path: str | Path,
                    batch_size: int = 16) -> int:
    """Write fused pre-classifier features plus true and predicted labels as CSV."""
    width = model.model_config.fusion.fused_dim
    header = [f"f{i}" for i in range(width)] + ["true_label", "pred_label"]
    rows = 0
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            if samples:
                for feats, logits, y in _forward_batches(model, samples, pre, batch_size):
                    for f, label, p in zip(feats, y, predict(logits)):
                        writer.writerow([format(float(v), ".9g") for v in f] + [int(label), int(p)])
                        rows += 1
    except OSError as exc:
        raise DataError(f"cannot write features to {path}: {exc}") from exc
    return rows


def read_features(path: str | Path, expected_width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load an exported feature file, checking its width against the model config."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != expected_width + 2:
            raise DimensionError(f"{path}: {len(header) - 2} feature columns, expected {expected_width}")
        rows = [list(map(float, r)) for r in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, expected_width + 2)
    return arr[:, :expected_width].astype(np.float32), arr[:, -2].astype(np.int64), arr[:, -1].astype(np.int64)
