"""Confusion-matrix accumulation, derived scores, and comparison analyses.

ConfusionCounts is a commutative accumulator (merge = field-wise sum), so
per-batch counts can be folded in any order and yield the same metrics as one
global pass. Precision/recall/F1/IoU follow the standard positive-class
definitions; degenerate denominators resolve to 0 (flagged), except the
all-true-negative case which reports 1 across the board (flagged).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    iou: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "iou": self.iou, "degenerate": list(self.degenerate)}


@dataclass
class DivergenceReport:
    """How the XOR of the two epoch masks relates to a reference change mask."""

    pixels_agreeing: int
    pixels_subtract_only: int
    pixels_label_only: int
    iou_vs_reference: float

    def to_dict(self) -> dict:
        return {"pixels_agreeing": self.pixels_agreeing,
                "pixels_subtract_only": self.pixels_subtract_only,
                "pixels_label_only": self.pixels_label_only,
                "iou_vs_reference": self.iou_vs_reference}


def binarize(p: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Threshold probabilities: 1 where p >= tau."""
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    return (np.asarray(p) >= tau).astype(np.uint8)


def _as_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ShapeError(f"{name} must be strictly binary")
    return arr.astype(bool)


def accumulate(pred: np.ndarray, label: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    p = _as_binary(pred, "prediction")
    y = _as_binary(label, "label")
    return ConfusionCounts(
        tp=int(np.sum(p & y)),
        fp=int(np.sum(p & ~y)),
        fn=int(np.sum(~p & y)),
        tn=int(np.sum(~p & ~y)),
    )


def compute_metrics(c: ConfusionCounts) -> MetricReport:
    if c.total <= 0:
        raise DataError("cannot compute metrics over zero pixels")
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        return MetricReport(1.0, 1.0, 1.0, 1.0, degenerate=("all_true_negative",))
    flags = []

    def ratio(num, den, flag):
        if den == 0:
            flags.append(flag)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision_undefined")
    recall = ratio(c.tp, c.tp + c.fn, "recall_undefined")
    f1 = ratio(2 * precision * recall, precision + recall, "f1_undefined")
    iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou_undefined")
    return MetricReport(precision, recall, f1, iou, degenerate=tuple(flags))


def f1_iou_from_pr(precision: float, recall: float) -> tuple[float, float]:
    """F1 and IoU implied by precision and recall of one confusion matrix.

    F1 = 2PR/(P+R); from a single matrix IoU = F1/(2-F1) identically.
    """
    if precision + recall == 0:
        return 0.0, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return f1, f1 / (2.0 - f1)


def post_classification_compare(seg1: np.ndarray, seg2: np.ndarray) -> np.ndarray:
    """Change map implied by two per-epoch masks: pixels whose class differs."""
    if np.asarray(seg1).shape != np.asarray(seg2).shape:
        raise ShapeError("segmentation maps differ in shape")
    a = _as_binary(seg1, "seg1")
    b = _as_binary(seg2, "seg2")
    return (a ^ b).astype(np.uint8)


def label_divergence(y_t1: np.ndarray, y_t2: np.ndarray, y_cd: np.ndarray) -> DivergenceReport:
    """Compare the subtraction of the epoch masks against the change mask."""
    subtracted = _as_binary(post_classification_compare(y_t1, y_t2), "subtracted")
    ref = _as_binary(y_cd, "y_cd")
    if subtracted.shape != ref.shape:
        raise ShapeError("change label shape differs from segmentation labels")
    agree = int(np.sum(subtracted & ref))
    sub_only = int(np.sum(subtracted & ~ref))
    lab_only = int(np.sum(~subtracted & ref))
    union = agree + sub_only + lab_only
    iou = 1.0 if union == 0 else agree / union
    return DivergenceReport(agree, sub_only, lab_only, iou)


def evaluate_split(ckpt, manifest, split: str, scenes, tau: float = 0.5,
                   batch: int = 16) -> dict:
    """Stream a split through the checkpointed model and accumulate one
    global confusion matrix per task.

    Returns {"change": MetricReport, "seg": MetricReport | None,
    "counts": {...}}; segmentation counts pool both epochs' predictions.
    """
    from . import trainer  # late import; trainer orchestrates model + data

    return trainer.evaluate_checkpoint(ckpt, manifest, split, scenes, tau=tau, batch=batch)


# ---------------------------------------------------------------------------
# report and mask output

def metrics_to_json(path: str | Path, run_id: str, split: str, tau: float,
                    reports: dict[str, MetricReport]) -> None:
    doc = {"run_id": run_id, "split": split, "tau": tau,
           "reports": {k: v.to_dict() for k, v in reports.items() if v is not None}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


CSV_COLUMNS = ("run_id", "split", "tau", "recall", "precision", "f1", "iou", "degenerate_flags")


def metrics_to_csv(path: str | Path, run_id: str, split: str, tau: float,
                   report: MetricReport) -> None:
    """Append one row; writes the header when creating the file."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        writer.writerow([run_id, split, tau, report.recall, report.precision,
                         report.f1, report.iou, ";".join(report.degenerate)])


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Binary map -> 1-channel {0, 255} PNG."""
    from PIL import Image

    arr = (_as_binary(mask, "mask").astype(np.uint8)) * 255
    Image.fromarray(arr).save(Path(path))


def write_overlay_png(path: str | Path, pred: np.ndarray, label: np.ndarray) -> None:
    """RGB agreement overlay: TP white, FP red, FN blue, TN black."""
    from PIL import Image

    p = _as_binary(pred, "prediction")
    y = _as_binary(label, "label")
    if p.shape != y.shape:
        raise ShapeError("overlay inputs differ in shape")
    rgb = np.zeros(p.shape + (3,), dtype=np.uint8)
    rgb[p & y] = (255, 255, 255)
    rgb[p & ~y] = (255, 0, 0)
    rgb[~p & y] = (0, 0, 255)
    Image.fromarray(rgb).save(Path(path))
