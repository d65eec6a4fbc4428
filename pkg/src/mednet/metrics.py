"""Pixel-wise evaluation over labeled pixels: sensitivity, specificity, Dice.

Counting is one-vs-rest per class and ignores every pixel whose ground
truth is the ignore value.  Classes without ground-truth support are absent
from reports; macro averages are unweighted means over supported classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .losses import IGNORE


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest integer counts over labeled pixels."""

    classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    tn: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.classes, dtype=np.int64))

    @property
    def labeled(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.classes != self.classes:
            raise DomainError("cannot merge counts with different class counts")
        return ConfusionCounts(self.classes, self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(pred_labels: np.ndarray, gt_labels: np.ndarray,
              ignore_value: int = IGNORE, classes: int = 6) -> ConfusionCounts:
    """Count TP/FP/TN/FN per class; pixels with ignored ground truth drop out."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DomainError(
            f"extent mismatch: pred {pred_labels.shape} vs gt {gt_labels.shape}")
    valid = gt_labels != ignore_value
    gt = gt_labels[valid].astype(np.int64)
    pred = pred_labels[valid].astype(np.int64)
    if gt.size and (gt.min() < 0 or gt.max() >= classes):
        raise DomainError(f"ground-truth label outside [0,{classes})")
    if pred.size and (pred.min() < 0 or pred.max() >= classes):
        raise DomainError(f"predicted label outside [0,{classes})")
    joint = np.bincount(gt * classes + pred, minlength=classes * classes)
    joint = joint.reshape(classes, classes)        # rows: gt, cols: pred
    tp = np.diag(joint).copy()
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    tn = gt.size - tp - fn - fp
    return ConfusionCounts(classes, tp, fp, tn, fn)


@dataclass
class MetricsReport:
    """Per-class rates over supported classes plus unweighted macro averages."""

    classes: int
    support: dict[int, int]
    sensitivity: dict[int, float]
    specificity: dict[int, float]
    dice: dict[int, float]
    macro_sensitivity: float
    macro_specificity: float
    macro_dice: float
    labeled_pixels: int


def rates(c: ConfusionCounts) -> MetricsReport:
    """Sens=TP/(TP+FN), spec=TN/(TN+FP), Dice=2TP/(2TP+FP+FN); no-support absent."""
    support, sens, spec, dice = {}, {}, {}, {}
    for k in range(c.classes):
        n_k = int(c.tp[k] + c.fn[k])
        if n_k == 0:
            continue
        support[k] = n_k
        sens[k] = c.tp[k] / (c.tp[k] + c.fn[k])
        if c.tn[k] + c.fp[k] > 0:
            spec[k] = c.tn[k] / (c.tn[k] + c.fp[k])
        dice[k] = 2 * c.tp[k] / (2 * c.tp[k] + c.fp[k] + c.fn[k])

    def macro(d: dict[int, float]) -> float:
        return sum(d.values()) / len(d) if d else math.nan

    return MetricsReport(classes=c.classes, support=support, sensitivity=sens,
                         specificity=spec, dice=dice,
                         macro_sensitivity=macro(sens), macro_specificity=macro(spec),
                         macro_dice=macro(dice), labeled_pixels=c.labeled)


def class_distribution(label_maps: list[np.ndarray], classes: int,
                       ignore_value: int = IGNORE) -> dict:
    """Labeled-pixel share per class plus the overall labeled fraction."""
    counts = np.zeros(classes, dtype=np.int64)
    total = 0
    for lab in label_maps:
        lab = np.asarray(lab)
        total += lab.size
        valid = lab[lab != ignore_value]
        counts += np.bincount(valid.astype(np.int64), minlength=classes)[:classes]
    labeled = int(counts.sum())
    return {
        "counts": {k: int(counts[k]) for k in range(classes)},
        "share": {k: (counts[k] / labeled if labeled else math.nan) for k in range(classes)},
        "labeled_fraction": labeled / total if total else math.nan,
        "labeled_pixels": labeled,
        "total_pixels": total,
    }


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def report_csv(report: MetricsReport) -> str:
    """Machine-readable rows: class,support,sensitivity,specificity,dice."""
    lines = ["class,support,sensitivity,specificity,dice"]
    for k in sorted(report.support):
        lines.append(f"{k},{report.support[k]},{_fmt(report.sensitivity.get(k))},"
                     f"{_fmt(report.specificity.get(k))},{_fmt(report.dice.get(k))}")
    lines.append(f"macro,{report.labeled_pixels},{_fmt(report.macro_sensitivity)},"
                 f"{_fmt(report.macro_specificity)},{_fmt(report.macro_dice)}")
    return "\n".join(lines) + "\n"


def report_text(report: MetricsReport, class_names: tuple[str, ...] | None = None) -> str:
    """Aligned human-readable table mirroring :func:`report_csv`."""
    rows = [("class", "support", "sens", "spec", "dice")]
    for k in sorted(report.support):
        name = class_names[k] if class_names and k < len(class_names) else str(k)
        rows.append((name, str(report.support[k]), _fmt(report.sensitivity.get(k)),
                     _fmt(report.specificity.get(k)), _fmt(report.dice.get(k))))
    rows.append(("macro", str(report.labeled_pixels), _fmt(report.macro_sensitivity),
                 _fmt(report.macro_specificity), _fmt(report.macro_dice)))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join(" ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"
