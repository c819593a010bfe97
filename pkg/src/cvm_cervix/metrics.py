"""Confusion matrices and precision / recall / F1 / accuracy."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """C×C counts; rows are true classes, columns are predicted classes."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes: int) -> ConfusionMatrix:
        cm = cls.zeros(num_classes)
        cm.update(labels, predictions)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, labels, predictions) -> None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
        if labels.shape != predictions.shape:
            raise DimensionError(f"{labels.size} labels vs {predictions.size} predictions")
        c = self.num_classes
        for name, arr in (("label", labels), ("prediction", predictions)):
            bad = np.flatnonzero((arr < 0) | (arr >= c))
            if bad.size:
                raise LabelError(f"{name} {arr[bad[0]]} at index {bad[0]} outside [0, {c})")
        np.add.at(self.counts, (labels, predictions), 1)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, class_names: list[str] | None = None) -> str:
        names = class_names or [str(i) for i in range(self.num_classes)]
        lines = ["true\\pred," + ",".join(names)]
        for name, row in zip(names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        # unweighted mean of per-class F1, not F1 of the macro P and R
        return float(np.mean(self.f1))

    def format(self, class_names: list[str] | None = None) -> str:
        names = class_names or [str(i) for i in range(len(self.precision))]
        width = max(10, *(len(n) for n in names))
        lines = [f"{'class':<{width}}  {'precision':>9}  {'recall':>9}  {'f1':>9}"]
        for n, p, r, f in zip(names, self.precision, self.recall, self.f1):
            lines.append(f"{n:<{width}}  {p:9.4f}  {r:9.4f}  {f:9.4f}")
        lines.append(f"{'macro':<{width}}  {self.macro_precision:9.4f}  {self.macro_recall:9.4f}  "
                     f"{self.macro_f1:9.4f}")
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def _safe_ratio(num: float, den: float, what: str, cls: int) -> float:
    if den == 0:
        log.info("%s undefined for class %d (zero denominator); using 0", what, cls)
        return 0.0
    return num / den


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest precision, recall and F1 per class; accuracy = trace / total."""
    counts = cm.counts
    c = cm.num_classes
    precision = np.zeros(c)
    recall = np.zeros(c)
    f1 = np.zeros(c)
    for k in range(c):
        tp = int(counts[k, k])
        fp = int(counts[:, k].sum()) - tp
        fn = int(counts[k, :].sum()) - tp
        p = _safe_ratio(tp, tp + fp, "precision", k)
        r = _safe_ratio(tp, tp + fn, "recall", k)
        precision[k], recall[k] = p, r
        f1[k] = _safe_ratio(2 * p * r, p + r, "F1", k)
    total = cm.total
    accuracy = float(np.trace(counts)) / total if total else 0.0
    return MetricsReport(precision, recall, f1, accuracy)
