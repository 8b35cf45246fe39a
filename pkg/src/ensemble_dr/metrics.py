"""Evaluation surface: confusion matrix, precision/recall/F1, top-1 error.

Macro (unweighted) averaging is the canonical report; micro averages are
also emitted in the JSON. Zero-denominator precision/recall yield 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from .ensemble import EnsembleModel, forward
from .errors import DatasetError


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list  # one ClassMetrics per class
    macro: dict  # precision / recall / f1
    micro: dict
    top1_error_pct: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": [
                {"precision": c.precision, "recall": c.recall, "f1": c.f1, "support": c.support}
                for c in self.per_class
            ],
            "macro": self.macro,
            "micro": self.micro,
            "top1_error_pct": self.top1_error_pct,
            "confusion": self.confusion.tolist(),
            "num_samples": self.num_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            accuracy=d["accuracy"],
            per_class=[ClassMetrics(**c) for c in d["per_class"]],
            macro=dict(d["macro"]),
            micro=dict(d["micro"]),
            top1_error_pct=d["top1_error_pct"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            num_samples=d["num_samples"],
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def confusion_to_csv(self, path, class_names: Sequence[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("true\\pred," + ",".join(class_names) + "\n")
            for name, row in zip(class_names, self.confusion):
                fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")


def confusion_matrix(true_labels, pred_labels, num_classes: int = ds.NUM_CLASSES) -> np.ndarray:
    """confusion[i, j] = count of samples with true class i predicted j."""
    true_arr = np.asarray(true_labels, dtype=np.int64)
    pred_arr = np.asarray(pred_labels, dtype=np.int64)
    if true_arr.shape != pred_arr.shape or true_arr.ndim != 1:
        raise DatasetError(
            f"label lists must be equal-length 1-D: {true_arr.shape} vs {pred_arr.shape}"
        )
    for name, arr in (("true", true_arr), ("pred", pred_arr)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DatasetError(f"{name} labels outside [0, {num_classes - 1}]")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true_arr, pred_arr), 1)
    return confusion


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def compute_metrics(true_labels, pred_labels, num_classes: int = ds.NUM_CLASSES) -> MetricsReport:
    confusion = confusion_matrix(true_labels, pred_labels, num_classes)
    total = int(confusion.sum())
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)

    per_class = []
    for c in range(num_classes):
        precision = _safe_div(tp[c], pred_totals[c])
        recall = _safe_div(tp[c], true_totals[c])
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class.append(ClassMetrics(precision, recall, f1, int(true_totals[c])))

    macro = {
        "precision": sum(c.precision for c in per_class) / num_classes,
        "recall": sum(c.recall for c in per_class) / num_classes,
        "f1": sum(c.f1 for c in per_class) / num_classes,
    }
    micro_p = _safe_div(float(tp.sum()), float(pred_totals.sum()))
    micro_r = _safe_div(float(tp.sum()), float(true_totals.sum()))
    micro = {
        "precision": micro_p,
        "recall": micro_r,
        "f1": _safe_div(2 * micro_p * micro_r, micro_p + micro_r),
    }
    accuracy = _safe_div(float(tp.sum()), total)
    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        macro=macro,
        micro=micro,
        top1_error_pct=100.0 * (1.0 - accuracy),
        confusion=confusion,
        num_samples=total,
    )


def predict_labels(
    model: EnsembleModel,
    manifest: ds.DatasetManifest,
    split: str,
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(true_labels, argmax predictions, probability matrix) for a split.

    Runs in infer mode; argmax ties break to the lowest class index.
    """
    records = manifest.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} is empty")
    all_probs = []
    true_labels = []
    for images, onehot in ds.batch_iterator(manifest, split, batch_size):
        all_probs.append(forward(model, images, mode="infer"))
        true_labels.extend(np.argmax(onehot, axis=1))
    probs = np.concatenate(all_probs, axis=0)
    pred = probs.argmax(axis=1)  # np.argmax returns the first (lowest) max index
    return np.asarray(true_labels, dtype=np.int64), pred.astype(np.int64), probs
