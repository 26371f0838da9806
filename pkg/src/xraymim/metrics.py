"""Evaluation metrics: ranking, confusion-count, overlap, and localization.

AUC is computed as the normalized Mann-Whitney U statistic with midranks
(ties count one half), which equals the trapezoidal area under the ROC
curve: every positive/negative pair contributes 1 if the positive scores
higher, 1/2 on a tie, 0 otherwise, and the ROC integral sums exactly those
pair outcomes. Midranks make the computation O(n log n) and ordering-robust.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetricError

# -- confusion counts ---------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_from_binary(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    return ConfusionCounts(
        tp=int((pred & truth).sum()),
        tn=int((~pred & ~truth).sum()),
        fp=int((pred & ~truth).sum()),
        fn=int((~pred & truth).sum()),
    )


def confusion_from_single_label(pred_ids: np.ndarray, true_ids: np.ndarray) -> ConfusionCounts:
    """Single-label outcomes folded to counts: correct -> TP, incorrect -> FP."""
    pred_ids = np.asarray(pred_ids)
    true_ids = np.asarray(true_ids)
    if pred_ids.shape != true_ids.shape:
        raise ShapeError(f"prediction {pred_ids.shape} vs truth {true_ids.shape}")
    correct = int((pred_ids == true_ids).sum())
    return ConfusionCounts(tp=correct, tn=0, fp=pred_ids.size - correct, fn=0)


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise UndefinedMetricError("accuracy undefined with zero evaluated items")
    return (counts.tp + counts.tn) / counts.total


def sensitivity(counts: ConfusionCounts) -> float:
    if counts.tp + counts.fn == 0:
        raise UndefinedMetricError("sensitivity undefined without positive items")
    return counts.tp / (counts.tp + counts.fn)


# -- ranking ------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties: 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ShapeError("labels must be 0/1")
    if not np.all(np.isfinite(scores)):
        raise ShapeError("scores must be finite")
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined with {pos} positives and {neg} negatives"
        )
    ranks = rankdata(scores)  # midranks: tied values share the average rank
    u = ranks[labels == 1].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def mean_auc(per_class_aucs) -> float:
    """Mean over defined class AUCs; None entries (undefined) are skipped."""
    defined = [a for a in per_class_aucs if a is not None]
    if not defined:
        raise UndefinedMetricError("no class has a defined AUC")
    return float(np.mean(defined))


def auc_per_class(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    """Column-wise AUCs for [N, K] score/label matrices; None where undefined."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    out: list[float | None] = []
    for k in range(scores.shape[1]):
        try:
            out.append(roc_auc(scores[:, k], labels[:, k]))
        except UndefinedMetricError:
            out.append(None)
    return out


# -- mask overlap -------------------------------------------------------------


def _mask_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    for m, what in ((pred, "prediction"), (truth, "truth")):
        if not np.all((m == 0) | (m == 1)):
            raise ShapeError(f"{what} mask must be binary 0/1")
    return pred.astype(bool), truth.astype(bool)


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|S&G| / (|S|+|G|); two empty masks count as a perfect match."""
    p, t = _mask_pair(pred, truth)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def jaccard(pred: np.ndarray, truth: np.ndarray) -> float:
    """|S&G| / |S|G|; two empty masks count as a perfect match."""
    p, t = _mask_pair(pred, truth)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


# -- boxes and localization ---------------------------------------------------


def box_iou(a, b) -> float:
    """Overlap of two half-open boxes (x0, y0, x1, y1)."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = max(0.0, iw) * max(0.0, ih)
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.1, 0.6, 11), 10))


@dataclass(frozen=True)
class LocalizationResult:
    thresholds: np.ndarray
    mean_ious: np.ndarray  # per threshold
    best_t: float
    iou_at_best: float
    ap25: float
    ap50: float
    pointing: float


def _normalize_cam(cam: np.ndarray) -> np.ndarray:
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= lo:
        # a constant map carries no ordering; treat the whole image as active
        return np.ones_like(cam, dtype=np.float64)
    return (cam.astype(np.float64) - lo) / (hi - lo)


def _largest_component_box(binary: np.ndarray) -> tuple[int, int, int, int] | None:
    labeled, count = cc_label(binary)  # 4-connectivity by default
    if count == 0:
        return None
    sizes = np.bincount(labeled.ravel())[1:]
    best = int(np.argmax(sizes)) + 1  # ties: lowest label id, deterministic
    rows, cols = np.nonzero(labeled == best)
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def cam_localize(cams, gt_boxes, thresholds=DEFAULT_THRESHOLDS) -> LocalizationResult:
    """Threshold-sweep localization score for one heatmap + one box per item.

    Heatmaps are min-max normalized per image (so any affine rescaling of
    the raw values changes nothing), binarized at each threshold of a grid
    over [0.1, 0.6], and the largest 4-connected component's bounding box is
    the predicted box. Reports per-threshold mean IoU, the best threshold
    t*, the fraction of items reaching IoU 0.25 / 0.5 at t* (the AP numbers:
    one prediction per item, so precision equals that fraction), and the
    pointing-game rate (heatmap argmax falls inside the true box).
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0 or thresholds.min() < 0.1 - 1e-9 or thresholds.max() > 0.6 + 1e-9:
        raise ShapeError("thresholds must lie within [0.1, 0.6]")
    cams = [np.asarray(c) for c in cams]
    boxes = [tuple(float(v) for v in b) for b in gt_boxes]
    if len(cams) != len(boxes) or not cams:
        raise ShapeError(f"{len(cams)} heatmaps vs {len(boxes)} boxes")

    normed = [_normalize_cam(c) for c in cams]
    ious = np.zeros((thresholds.size, len(cams)))
    for ti, t in enumerate(thresholds):
        for i, cam in enumerate(normed):
            pred_box = _largest_component_box(cam >= t)
            ious[ti, i] = 0.0 if pred_box is None else box_iou(pred_box, boxes[i])

    mean_ious = ious.mean(axis=1)
    best_idx = int(np.argmax(mean_ious))
    best_row = ious[best_idx]

    hits = 0
    for cam, box in zip(normed, boxes):
        r, c = np.unravel_index(int(np.argmax(cam)), cam.shape)
        x0, y0, x1, y1 = box
        hits += int(x0 <= c < x1 and y0 <= r < y1)

    return LocalizationResult(
        thresholds=thresholds,
        mean_ious=mean_ious,
        best_t=float(thresholds[best_idx]),
        iou_at_best=float(mean_ious[best_idx]),
        ap25=float((best_row >= 0.25).mean()),
        ap50=float((best_row >= 0.5).mean()),
        pointing=hits / len(cams),
    )


def write_localization_report(path, result: LocalizationResult) -> None:
    """CSV with one row per threshold followed by the summary rates."""
    lines = ["threshold,mean_iou"]
    for t, iou in zip(result.thresholds, result.mean_ious):
        lines.append(f"{float(t)!r},{float(iou)!r}")
    lines.append(f"ap25,{float(result.ap25)!r}")
    lines.append(f"ap50,{float(result.ap50)!r}")
    lines.append(f"pointing,{float(result.pointing)!r}")
    lines.append(f"best_t,{float(result.best_t)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
