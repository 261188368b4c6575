"""Threshold calibration on normal-only data and detection metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import DatasetIndex, load_image, load_mask, resize_image, resize_mask
from .inference import AnomalyHeatmap, DetectionResult, PostprocessConfig, largest_component, predict, segment
from .model import Autoencoder

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def _values(h) -> np.ndarray:
    return h.values if isinstance(h, AnomalyHeatmap) else np.asarray(h)


def calibrate_threshold(val_heatmaps: Sequence, min_area: int, connectivity: int = 8) -> float:
    """Smallest observed-value threshold t such that no component of (h >= t)
    in any validation heatmap reaches ``min_area`` pixels.

    Candidates are the distinct heatmap values plus the next float above the
    maximum (always feasible); feasibility is monotone in t, so a bisection
    over the sorted candidates finds the smallest feasible one.
    """
    if not len(val_heatmaps):
        raise EvaluationError("calibration needs at least one validation heatmap")
    if min_area < 1:
        raise EvaluationError("min_area must be at least 1")
    maps = [_values(h) for h in val_heatmaps]
    cands = np.unique(np.concatenate([m.ravel() for m in maps]))
    cands = np.append(cands, np.nextafter(cands[-1], np.inf))

    def feasible(t: float) -> bool:
        return all(largest_component(m >= t, connectivity) < min_area for m in maps)

    lo, hi = 0, len(cands) - 1  # cands[hi] is feasible
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(cands[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(cands[lo])


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def tpr(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else math.nan

    @property
    def tnr(self) -> float:
        d = self.tn + self.fp
        return self.tn / d if d else math.nan

    @property
    def balanced(self) -> float:
        return (self.tpr + self.tnr) / 2

    @property
    def f1_defined(self) -> bool:
        return 2 * self.tp + self.fp + self.fn > 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def f1(counts: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 0 when nothing was predicted or present."""
    if not counts.f1_defined:
        log.warning("F1 undefined (no positives predicted or present); reporting 0")
        return 0.0
    return 2 * counts.tp / (2 * counts.tp + counts.fp + counts.fn)


def confusion(results: Sequence[DetectionResult], truths: Sequence, granularity: str = "image") -> ConfusionCounts:
    """Image level: truths are booleans (anomalous). Pixel level: truths are
    masks, or None for normal images."""
    if len(results) != len(truths):
        raise EvaluationError("results and ground truth differ in length")
    if granularity == "image":
        tp = tn = fp = fn = 0
        for r, y in zip(results, truths):
            if y is None:
                raise EvaluationError("missing image-level ground truth")
            if y and r.anomalous:
                tp += 1
            elif y:
                fn += 1
            elif r.anomalous:
                fp += 1
            else:
                tn += 1
        return ConfusionCounts(tp, tn, fp, fn)
    if granularity == "pixel":
        total = ConfusionCounts()
        for r, gt in zip(results, truths):
            gt = np.zeros(r.mask.shape, bool) if gt is None else np.asarray(gt, bool)
            if gt.shape != r.mask.shape:
                raise EvaluationError("ground-truth mask does not match the prediction")
            pred = r.mask
            total = total + ConfusionCounts(
                int(np.sum(pred & gt)), int(np.sum(~pred & ~gt)), int(np.sum(pred & ~gt)), int(np.sum(~pred & gt))
            )
        return total
    raise ValueError(f"unknown granularity {granularity!r}")


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney form of the ROC area, ties at midranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both positive and negative pixels")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pixel_auroc(heatmaps: Sequence, masks: Sequence) -> float:
    """AUROC over all pixels pooled across the set; None masks count as all-normal."""
    scores, labels = [], []
    for h, m in zip(heatmaps, masks, strict=True):
        v = _values(h)
        scores.append(v.ravel())
        labels.append(np.zeros(v.size, bool) if m is None else np.asarray(m, bool).ravel())
    return auroc(np.concatenate(scores), np.concatenate(labels))


@dataclass
class MetricsRow:
    category: str
    tpr: float
    tnr: float
    balanced_accuracy: float
    pixel_auroc: float
    image_f1: float
    pixel_f1: float
    threshold: float
    min_area: int


COLUMNS = [f.name for f in MetricsRow.__dataclass_fields__.values()]


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def averages(self) -> dict[str, float]:
        out = {}
        for col in COLUMNS[1:7]:
            vals = [getattr(r, col) for r in self.rows]
            out[col] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(v) for v in asdict(r).values()])
        if len(self.rows) > 1:
            avg = self.averages()
            w.writerow(["average"] + [_fmt(avg[c]) for c in COLUMNS[1:7]] + ["", ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        head = f"{'category':<16}{'TPR':>7}{'TNR':>7}{'(T+T)/2':>9}{'AUROC':>8}{'F1 img':>8}{'F1 px':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.category:<16}{r.tpr:>7.3f}{r.tnr:>7.3f}{r.balanced_accuracy:>9.3f}"
                         f"{r.pixel_auroc:>8.3f}{r.image_f1:>8.3f}{r.pixel_f1:>8.3f}")
        if len(self.rows) > 1:
            a = self.averages()
            lines.append(f"{'average':<16}{a['tpr']:>7.3f}{a['tnr']:>7.3f}{a['balanced_accuracy']:>9.3f}"
                         f"{a['pixel_auroc']:>8.3f}{a['image_f1']:>8.3f}{a['pixel_f1']:>8.3f}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def validation_heatmaps(net: Autoencoder, index: DatasetIndex, post: PostprocessConfig) -> list[AnomalyHeatmap]:
    side = net.config.side
    out = []
    for rec in index.validation:
        img = resize_image(load_image(rec.image), side)
        out.append(predict(net, img, post, source=str(rec.image)).heatmap)
    if not out:
        raise EvaluationError("validation split is empty; cannot calibrate")
    return out


@dataclass
class CategoryEvaluation:
    row: MetricsRow
    heatmaps: list[AnomalyHeatmap]
    masks: list[np.ndarray | None]
    results: list[DetectionResult]
    labels: list[bool]


def evaluate_category(net: Autoencoder, index: DatasetIndex, post: PostprocessConfig,
                      min_area: int | None = None) -> CategoryEvaluation:
    """Calibrate on validation (unless ``post.threshold`` is set), then score the test split."""
    min_area = post.min_area if min_area is None else min_area
    threshold = post.threshold
    if threshold is None:
        threshold = calibrate_threshold(validation_heatmaps(net, index, post), min_area, post.connectivity)
    if not index.test:
        raise EvaluationError("test split is empty")
    side = net.config.side
    heatmaps, masks, results, labels = [], [], [], []
    for rec in index.test:
        img = resize_image(load_image(rec.image), side)
        hm = predict(net, img, post, source=str(rec.image)).heatmap
        gt = None
        if rec.anomalous:
            if rec.mask is None:
                raise EvaluationError(f"missing ground truth for {rec.image}")
            gt = resize_mask(load_mask(rec.mask), side)
        heatmaps.append(hm)
        masks.append(gt)
        results.append(segment(hm, threshold, min_area, post.connectivity))
        labels.append(rec.anomalous)
    img_counts = confusion(results, labels, "image")
    px_counts = confusion(results, masks, "pixel")
    try:
        px_auc = pixel_auroc(heatmaps, masks)
    except EvaluationError:
        px_auc = math.nan
    row = MetricsRow(
        category=index.category,
        tpr=img_counts.tpr,
        tnr=img_counts.tnr,
        balanced_accuracy=img_counts.balanced,
        pixel_auroc=px_auc,
        image_f1=f1(img_counts),
        pixel_f1=f1(px_counts),
        threshold=threshold,
        min_area=min_area,
    )
    return CategoryEvaluation(row, heatmaps, masks, results, labels)
