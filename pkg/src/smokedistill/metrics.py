"""Segmentation metrics.

mIoU is the mean of per-image IoU values, not IoU pooled over the dataset.
The binary metrics are likewise computed per image and then averaged.
Conventions for empty sets: IoU of two empty masks is 1.0, and any 0/0
ratio in accuracy/precision/recall/F1 is 1.0.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import SegMask

AGGREGATION = "per-sample mean"
METRIC_NAMES = ("miou", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    miou: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    sample_count: int
    fp_rate: float | None = None
    per_source: dict[str, "MetricsReport"] = field(default_factory=dict)
    aggregation: str = AGGREGATION

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (*METRIC_NAMES, "sample_count")}
        if self.fp_rate is not None:
            out["fp_rate"] = self.fp_rate
        if self.per_source:
            out["per_source"] = {k: v.to_dict() for k, v in sorted(self.per_source.items())}
        out["aggregation"] = self.aggregation
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, name: str = "model") -> str:
        labels = [name] + [f"  {s}" for s in sorted(self.per_source)]
        width = max(16, *(len(lb) + 2 for lb in labels))
        header = f"{'Model':<{width}}" + "".join(f"{h:>10}" for h in ("mIoU", "Acc.", "Prec.", "Rec.", "F1"))
        rows = [header, "-" * len(header), self._row(name, width)]
        for source, sub in sorted(self.per_source.items()):
            rows.append(sub._row(f"  {source}", width))
        return "\n".join(rows)

    def _row(self, name: str, width: int = 16) -> str:
        return f"{name:<{width}}" + "".join(f"{getattr(self, k):>10.3f}" for k in METRIC_NAMES)


def _check_pair(pred: SegMask, gt: SegMask) -> None:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"mask size mismatch: {pred.width}x{pred.height} vs {gt.width}x{gt.height}")


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> SegMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    prob = np.asarray(prob_map, dtype=np.float64)
    if prob.size and (np.nanmin(prob) < 0.0 or np.nanmax(prob) > 1.0 or np.isnan(prob).any()):
        raise ValueError("probabilities must lie in [0, 1]")
    return SegMask(prob >= threshold)


def confusion_counts(pred: SegMask, gt: SegMask) -> ConfusionCounts:
    _check_pair(pred, gt)
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, tn=p.size - tp - fp - fn, fp=fp, fn=fn)


def sample_iou(pred: SegMask, gt: SegMask) -> float:
    _check_pair(pred, gt)
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def mean_iou(pairs: Iterable[tuple[SegMask, SegMask]]) -> float:
    ious = [sample_iou(p, g) for p, g in pairs]
    if not ious:
        raise ValueError("mean_iou needs at least one (pred, gt) pair")
    return float(np.mean(ious))


def pooled_iou(pairs: Iterable[tuple[SegMask, SegMask]]) -> float:
    """Dataset-level IoU (sum of intersections over sum of unions), for comparison only."""
    inter = union = 0
    for p, g in pairs:
        _check_pair(p, g)
        a, b = p.data.astype(bool), g.data.astype(bool)
        inter += int(np.count_nonzero(a & b))
        union += int(np.count_nonzero(a | b))
    return 1.0 if union == 0 else inter / union


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def binary_metrics(c: ConfusionCounts) -> BinaryMetrics:
    return BinaryMetrics(
        accuracy=_ratio(c.tp + c.tn, c.total),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    )


def false_positive_rate(preds: Sequence[SegMask], min_area: int = 0) -> float:
    """Fraction of (known smokeless) images with more than ``min_area`` predicted pixels."""
    if not preds:
        raise ValueError("false_positive_rate needs at least one prediction")
    if min_area < 0:
        raise ValueError("min_area must be non-negative")
    flagged = sum(1 for p in preds if p.positives > min_area)
    return flagged / len(preds)


def summarize(pairs: Sequence[tuple[SegMask, SegMask]], sources: Sequence[str] | None = None) -> MetricsReport:
    """Per-sample metrics averaged over samples, with optional per-source breakdown."""
    if not pairs:
        raise ValueError("no samples to summarize")
    rows = []
    for pred, gt in pairs:
        bm = binary_metrics(confusion_counts(pred, gt))
        rows.append((sample_iou(pred, gt), bm.accuracy, bm.precision, bm.recall, bm.f1))
    arr = np.asarray(rows, dtype=np.float64)
    means = arr.mean(axis=0)
    report = MetricsReport(*map(float, means), sample_count=len(pairs))
    if sources is not None:
        if len(sources) != len(pairs):
            raise ValueError("sources must align with pairs")
        groups: dict[str, list[int]] = defaultdict(list)
        for i, s in enumerate(sources):
            groups[str(s)].append(i)
        for s, idx in groups.items():
            sub = arr[idx].mean(axis=0)
            report.per_source[s] = MetricsReport(*map(float, sub), sample_count=len(idx))
    return report


def evaluate_model(model,
                   samples: Sequence[tuple[str, np.ndarray, SegMask]],
                   threshold: float = 0.5,
                   smokeless: Sequence[np.ndarray] | None = None) -> MetricsReport:
    """Evaluate a model on (source, image, gt_mask) triples.

    ``model`` is anything with a ``predict_proba`` method, or a plain callable,
    that maps an (H, W, 3) uint8 image to an (H, W) array of smoke
    probabilities (sigmoid of the final segmentation logits). When
    ``smokeless`` images are given the report also carries the FP rate.
    """
    predict: Callable[[np.ndarray], np.ndarray] = getattr(model, "predict_proba", model)
    pairs, sources = [], []
    for source, image, gt in samples:
        if gt is None:
            raise ValueError("every test sample needs a ground-truth mask")
        prob = predict(image)
        pairs.append((binarize(prob, threshold), gt))
        sources.append(source)
    report = summarize(pairs, sources)
    if smokeless:
        report.fp_rate = false_positive_rate([binarize(predict(im), threshold) for im in smokeless])
    return report


def report_from_dict(d: Mapping) -> MetricsReport:
    sub = {k: report_from_dict(v) for k, v in (d.get("per_source") or {}).items()}
    return MetricsReport(*(float(d[k]) for k in METRIC_NAMES), sample_count=int(d["sample_count"]),
                         fp_rate=d.get("fp_rate"), per_source=sub,
                         aggregation=d.get("aggregation", AGGREGATION))

