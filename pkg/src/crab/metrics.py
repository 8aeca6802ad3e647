"""Confusion matrices and recall-centric classification metrics.

WAR is plain accuracy (trace over total). UAR is the mean per-class recall;
classes with zero support are excluded from UAR and Macro-F1. Precision over
an empty predicted column is defined as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class PerClassMetrics:
    recall: float
    precision: float
    f1: float
    support: int


@dataclass
class MetricReport:
    war: float
    uar: float
    macro_f1: float
    per_class: list[PerClassMetrics]

    def to_json_dict(self) -> dict:
        return {
            "war": self.war,
            "uar": self.uar,
            "macro_f1": self.macro_f1,
            "per_class": [
                {
                    "recall": c.recall,
                    "precision": c.precision,
                    "f1": c.f1,
                    "support": c.support,
                }
                for c in self.per_class
            ],
        }


def confusion(labels, predictions, num_classes: int) -> np.ndarray:
    """Exact counts; rows are true classes, columns predicted classes."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.ndim != 1:
        raise ShapeError("labels and predictions must be equal-length 1-D arrays")
    if labels.size == 0:
        raise ContractError("cannot build a confusion matrix from zero samples")
    for name, arr in (("labels", labels), ("predictions", predictions)):
        if (arr < 0).any() or (arr >= num_classes).any():
            raise ContractError(f"{name} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def report(cm: np.ndarray) -> MetricReport:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError("confusion matrix must be square")
    total = int(cm.sum())
    if total == 0:
        raise ContractError("empty confusion matrix")
    diag = np.diag(cm).astype(np.float64)
    row_sums = cm.sum(axis=1).astype(np.float64)
    col_sums = cm.sum(axis=0).astype(np.float64)

    per_class = []
    for j in range(cm.shape[0]):
        support = int(row_sums[j])
        recall = diag[j] / row_sums[j] if row_sums[j] > 0 else 0.0
        precision = diag[j] / col_sums[j] if col_sums[j] > 0 else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if (precision + recall) > 0
            else 0.0
        )
        per_class.append(PerClassMetrics(recall, precision, f1, support))

    supported = [j for j in range(cm.shape[0]) if row_sums[j] > 0]
    war = float(diag.sum() / total)
    uar = float(np.mean([per_class[j].recall for j in supported]))
    macro_f1 = float(np.mean([per_class[j].f1 for j in supported]))
    return MetricReport(war=war, uar=uar, macro_f1=macro_f1, per_class=per_class)


def emit_report(
    rep: MetricReport, cm: np.ndarray, out_dir, class_names: Sequence[str]
) -> tuple[Path, Path]:
    """Write metrics.json and confusion.csv (header row of class names)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cm = np.asarray(cm)
    if len(class_names) != cm.shape[0]:
        raise ShapeError("one class name per confusion matrix row required")

    metrics_path = out_dir / "metrics.json"
    payload = rep.to_json_dict()
    payload["class_names"] = list(class_names)
    metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    cm_path = out_dir / "confusion.csv"
    with open(cm_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, cm):
            writer.writerow([name] + [int(v) for v in row])
    return metrics_path, cm_path


def read_confusion_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
