"""Pixel-level confusion metrics, ROC/AUC, lesion-level FROC, and the
image-level screening decision.

Undefined ratios (zero denominators) are reported as None and printed as
"undefined", never silently as 0. The FROC hit criterion is any-pixel
overlap between a detected region and a labeled lesion component, one hit
per component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detection import EIGHT_CONNECTED, PostprocessConfig, Region, \
    connected_components, region_filter
from .errors import DataError, ShapeMismatchError

DR = "DR"
NO_DR = "noDR"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    se: float | None      # TP / (TP + FN)
    sp: float | None      # TN / (TN + FP)
    pred: float | None    # TP / (TP + FP)
    ac: float | None      # (TP + TN) / total

    def row(self) -> list[str]:
        return [f"{v:.4f}" if v is not None else "undefined"
                for v in (self.se, self.sp, self.pred, self.ac)]


@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]   # (threshold, 1-SP, SE) desc by thr
    auc: float


@dataclass
class FrocCurve:
    points: list[tuple[float, float, float]]   # (threshold, avg FP/image, SE)


def confusion(predicted: np.ndarray, label: np.ndarray,
              mask: np.ndarray) -> ConfusionCounts:
    """Pixel counts over in-mask pixels only."""
    predicted = np.asarray(predicted, dtype=bool)
    label = np.asarray(label, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if predicted.shape != label.shape or predicted.shape != mask.shape:
        raise ShapeMismatchError(
            f"rasters misaligned: predicted {predicted.shape}, "
            f"label {label.shape}, mask {mask.shape}")
    p = predicted[mask]
    l = label[mask]
    tp = int((p & l).sum())
    fp = int((p & ~l).sum())
    fn = int((~p & l).sum())
    tn = int((~p & ~l).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def metrics(c: ConfusionCounts) -> MetricsReport:
    def ratio(num: int, den: int) -> float | None:
        return num / den if den > 0 else None

    return MetricsReport(
        se=ratio(c.tp, c.tp + c.fn),
        sp=ratio(c.tn, c.tn + c.fp),
        pred=ratio(c.tp, c.tp + c.fp),
        ac=ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
    )


def roc_from_scores(scores: np.ndarray, labels: np.ndarray,
                    thresholds=None) -> RocCurve:
    """ROC over flat score/label arrays; prediction is score >= threshold.

    Sweeps every distinct score unless a grid is supplied; the endpoints
    (0,0) and (1,1) are always present; AUC by the trapezoidal rule (equal to
    the Mann-Whitney statistic when sweeping all distinct scores).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ShapeMismatchError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"ROC needs both classes; got {n_pos} positives, {n_neg} negatives")
    if thresholds is None:
        thr = np.unique(scores)[::-1]
    else:
        thr = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp_cum = np.cumsum(labels[order])
    # predictions at threshold t cover the sorted prefix with score >= t
    counts = np.searchsorted(-s_sorted, -thr, side="right")
    tp = np.where(counts > 0, tp_cum[np.maximum(counts - 1, 0)], 0)
    fp = counts - tp
    pts = [(float("inf"), 0.0, 0.0)]
    pts += [(float(t), float(f) / n_neg, float(p) / n_pos)
            for t, f, p in zip(thr, fp, tp)]
    if pts[-1][1:] != (1.0, 1.0):
        pts.append((float("-inf"), 1.0, 1.0))
    fpr = np.array([p[1] for p in pts])
    se = np.array([p[2] for p in pts])
    auc = float(np.trapezoid(se, fpr))
    return RocCurve(pts, auc)


def roc_auc(prob: np.ndarray, label: np.ndarray, mask: np.ndarray | None = None,
            thresholds=None) -> RocCurve:
    """Pixel-level ROC of a probability raster against a label raster."""
    prob = np.asarray(prob, dtype=np.float64)
    label = np.asarray(label, dtype=bool)
    if prob.shape != label.shape:
        raise ShapeMismatchError(
            f"probability raster {prob.shape} != label raster {label.shape}")
    if mask is None:
        mask = np.ones(prob.shape, dtype=bool)
    if mask.shape != prob.shape:
        raise ShapeMismatchError("mask raster misaligned")
    return roc_from_scores(prob[mask], label[mask], thresholds)


def roc_auc_pooled(probs: list[np.ndarray], labels: list[np.ndarray],
                   masks: list[np.ndarray], thresholds=None) -> RocCurve:
    """ROC over the in-mask pixels of a whole corpus pooled together."""
    s = np.concatenate([np.asarray(p, dtype=np.float64)[m]
                        for p, m in zip(probs, masks)])
    l = np.concatenate([np.asarray(y, dtype=bool)[m]
                        for y, m in zip(labels, masks)])
    return roc_from_scores(s, l, thresholds)


def label_components(label_raster: np.ndarray) -> np.ndarray:
    """8-connected component labeling of a lesion raster."""
    return ndimage.label(np.asarray(label_raster, dtype=bool),
                         structure=EIGHT_CONNECTED)[0]


def froc(detections: list[list[list[Region]]], label_rasters: list[np.ndarray],
         thresholds) -> FrocCurve:
    """Lesion-level curve from per-threshold, per-image accepted regions.

    A region is a true positive when any of its pixels overlaps a labeled
    component; each labeled component counts at most once toward SE.
    """
    if not label_rasters:
        raise DataError("FROC needs at least one image")
    thresholds = list(thresholds)
    comp = [label_components(lr) for lr in label_rasters]
    total_lesions = sum(int(c.max()) for c in comp)
    n_images = len(label_rasters)
    pts = []
    for t, per_image in zip(thresholds, detections, strict=True):
        hits: set[tuple[int, int]] = set()
        fp = 0
        for ii, regions in enumerate(per_image):
            for r in regions:
                ids = np.unique(comp[ii][r.pixels[:, 0], r.pixels[:, 1]])
                ids = ids[ids > 0]
                if ids.size:
                    hits.update((ii, int(c)) for c in ids)
                else:
                    fp += 1
        se = len(hits) / total_lesions if total_lesions else 0.0
        pts.append((float(t), fp / n_images, se))
    pts.sort(key=lambda p: -p[0])
    return FrocCurve(pts)


def froc_sweep(prob_maps: list, label_rasters: list[np.ndarray], thresholds,
               post_cfg: PostprocessConfig = PostprocessConfig()) -> FrocCurve:
    """Threshold sweep of the full postprocess (components + region filter)."""
    detections = []
    for t in thresholds:
        per_image = []
        for pm in prob_maps:
            fg = (pm.prob >= t) & ~pm.skipped
            per_image.append(region_filter(connected_components(fg), post_cfg))
        detections.append(per_image)
    return froc(detections, label_rasters, thresholds)


def image_decision(accepted_regions: list[Region], min_count: int = 1) -> str:
    """Screening call for one image: DR when at least min_count regions
    survive the postprocess (MA presence is the earliest DR sign)."""
    return DR if len(accepted_regions) >= min_count else NO_DR


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,one_minus_sp,se\n")
        for t, fpr, se in curve.points:
            fh.write(f"{t!r},{fpr!r},{se!r}\n")


def write_froc_csv(path, curve: FrocCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,avg_fp_per_image,se\n")
        for t, fp, se in curve.points:
            fh.write(f"{t!r},{fp!r},{se!r}\n")
