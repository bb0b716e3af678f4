"""Confusion counting, evaluation metrics, and confidence intervals.

Segmentation quality uses pixel-level accuracy, IoU, and DSC; detection
quality uses sample-level accuracy, precision, sensitivity, F1, and
specificity. Every metric gets a 95% confidence radius

    r = z * sqrt(metric * (1 - metric) / N)

where N is the number of test samples (not pixels) and z defaults to
1.96. Segmentation confusion is micro-averaged by default (accumulated
over all pixels of all samples); per-image macro averaging is available
behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .errors import AlignmentError, DimensionError, UsageError

SEG_TASKS = ("lung_seg", "infection_seg")
DET_TASK = "detection"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            tn=self.tn + other.tn,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
        )


def confusion(pred, gt) -> ConfusionCounts:
    """Exact confusion counts; positive/foreground is the value 1."""
    p = np.asarray(pred).ravel().astype(bool)
    g = np.asarray(gt).ravel().astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"prediction and ground truth sizes differ: {p.size} vs {g.size}")
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        tn=int(np.sum(~p & ~g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
    )


@dataclass(frozen=True)
class SegMetrics:
    accuracy: float
    iou: float
    dsc: float

    def as_dict(self) -> Dict[str, float]:
        return {"accuracy": self.accuracy, "iou": self.iou, "dsc": self.dsc}


@dataclass(frozen=True)
class DetMetrics:
    accuracy: Optional[float]
    precision: Optional[float]
    sensitivity: Optional[float]
    f1: Optional[float]
    specificity: Optional[float]

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "f1": self.f1,
            "specificity": self.specificity,
        }


def seg_metrics(c: ConfusionCounts) -> SegMetrics:
    """Pixel accuracy, intersection-over-union, and Dice coefficient.

    IoU and DSC are defined as 1 when both masks are empty (tp+fp+fn=0).
    """
    if c.total == 0:
        raise UsageError("cannot compute metrics over an empty population")
    union = c.tp + c.fp + c.fn
    return SegMetrics(
        accuracy=(c.tp + c.tn) / c.total,
        iou=1.0 if union == 0 else c.tp / union,
        dsc=1.0 if union == 0 else 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn),
    )


def det_metrics(c: ConfusionCounts) -> DetMetrics:
    """Sample-level detection metrics; undefined ratios come back as None."""
    accuracy = (c.tp + c.tn) / c.total if c.total else None
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else None
    sensitivity = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else None
    specificity = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else None
    if precision is not None and sensitivity is not None and (precision + sensitivity) > 0:
        f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
    else:
        f1 = None
    return DetMetrics(
        accuracy=accuracy,
        precision=precision,
        sensitivity=sensitivity,
        f1=f1,
        specificity=specificity,
    )


@dataclass(frozen=True)
class CIParams:
    n: int
    z: float = 1.96

    def __post_init__(self):
        if self.n < 1:
            raise UsageError(f"confidence interval needs n >= 1, got {self.n}")
        if self.z <= 0:
            raise UsageError(f"z must be positive, got {self.z}")


def confidence_radius(metric: float, p: CIParams) -> float:
    """Binomial-approximation confidence radius for a metric in [0, 1]."""
    if not 0.0 <= metric <= 1.0:
        raise UsageError(f"metric must lie in [0, 1], got {metric}")
    return p.z * math.sqrt(metric * (1.0 - metric) / p.n)


@dataclass
class MetricsReport:
    task: str
    n: int
    values: Dict[str, Optional[float]]
    radii: Dict[str, Optional[float]]
    model: str = ""
    encoder: str = ""
    averaging: str = "micro"
    confusion: ConfusionCounts = field(default_factory=ConfusionCounts)

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "encoder": self.encoder,
            "n": self.n,
            "averaging": self.averaging,
            "values": dict(self.values),
            "radii": dict(self.radii),
            "confusion": {
                "tp": self.confusion.tp,
                "tn": self.confusion.tn,
                "fp": self.confusion.fp,
                "fn": self.confusion.fn,
            },
        }


def _align(preds: Mapping, gts: Mapping) -> Sequence:
    missing_in_pred = sorted(set(gts) - set(preds))
    missing_in_gt = sorted(set(preds) - set(gts))
    if missing_in_pred or missing_in_gt:
        raise AlignmentError(
            "prediction/ground-truth ids do not align",
            missing_in_pred=missing_in_pred,
            missing_in_gt=missing_in_gt,
        )
    return sorted(preds)


def evaluate_run(
    preds: Mapping,
    gts: Mapping,
    task: str,
    model: str = "",
    encoder: str = "",
    averaging: str = "micro",
    z: float = 1.96,
) -> MetricsReport:
    """Score a prediction set against ground truth, aligned by id.

    Segmentation tasks take id -> mask mappings; the detection task takes
    id -> {0,1} labels. The CI population n is always the sample count.
    """
    if task not in SEG_TASKS and task != DET_TASK:
        raise UsageError(f"unknown task {task!r}")
    if averaging not in ("micro", "macro"):
        raise UsageError(f"averaging must be 'micro' or 'macro', got {averaging!r}")
    ids = _align(preds, gts)
    if not ids:
        raise UsageError("nothing to evaluate: empty prediction set")
    n = len(ids)
    ci = CIParams(n=n, z=z)

    if task == DET_TASK:
        pred_labels = [int(preds[i]) for i in ids]
        gt_labels = [int(gts[i]) for i in ids]
        counts = confusion(pred_labels, gt_labels)
        values = det_metrics(counts).as_dict()
    elif averaging == "micro":
        counts = ConfusionCounts()
        for i in ids:
            counts = counts + confusion(preds[i], gts[i])
        values = seg_metrics(counts).as_dict()
    else:
        counts = ConfusionCounts()
        sums = {"accuracy": 0.0, "iou": 0.0, "dsc": 0.0}
        for i in ids:
            c = confusion(preds[i], gts[i])
            counts = counts + c
            for key, value in seg_metrics(c).as_dict().items():
                sums[key] += value
        values = {key: value / n for key, value in sums.items()}

    radii = {
        key: None if value is None else confidence_radius(value, ci)
        for key, value in values.items()
    }
    return MetricsReport(
        task=task, n=n, values=values, radii=radii,
        model=model, encoder=encoder, averaging=averaging, confusion=counts,
    )


def format_report_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table of metric +- radius columns, in percent."""
    if not reports:
        return ""
    metric_names = list(reports[0].values)
    header = ["Task", "Model", "Encoder", "N"] + [m.capitalize() for m in metric_names]
    rows = [header]
    for rep in reports:
        cells = [rep.task, rep.model or "-", rep.encoder or "-", str(rep.n)]
        for name in metric_names:
            value, radius = rep.values.get(name), rep.radii.get(name)
            if value is None:
                cells.append("undefined")
            else:
                cells.append(f"{100 * value:.2f} ± {100 * radius:.2f}")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    return "\n".join(lines)
