"""Saliency and instance-level evaluation: precision/recall, F-measure,
structure measure, enhanced-alignment measure, MAE, threshold sweeps, and
AP at the 0.5-IoU operating point with greedy matching.

Structure/enhanced-alignment internals follow their standard reference
algorithms (object/region decomposition with a centroid quadrant split and
per-region SSIM; mean-centered alignment maps with the degenerate
all-foreground / all-background shortcuts). The enhanced-alignment score is
averaged over W*H pixels so a perfect prediction scores exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prompts import ScoredInstance, mask_iou

__all__ = [
    "MetricReport",
    "DetectionSet",
    "precision_recall",
    "f_beta",
    "adaptive_threshold",
    "threshold_sweep",
    "s_measure",
    "e_measure",
    "mae",
    "evaluate_saliency",
    "ap50",
    "detection_report",
]

_EPS = np.spacing(1.0)
NUM_THRESHOLDS = 256


def _as_binary(mask, name="mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {mask.shape}")
    return mask.astype(bool)


def _as_saliency(sal) -> np.ndarray:
    sal = np.asarray(sal, dtype=np.float64)
    if sal.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {sal.shape}")
    if sal.min() < 0.0 or sal.max() > 1.0:
        raise ValueError("saliency values must lie in [0, 1]")
    return sal


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def precision_recall(pred, gt) -> tuple[float, float]:
    """|P&G|/|P| and |P&G|/|G|. Empty-P precision is 1 if G is also empty,
    else 0; empty-G recall is 1 (nothing was there to find)."""
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    _check_dims(pred, gt)
    inter = int(np.logical_and(pred, gt).sum())
    np_, ng = int(pred.sum()), int(gt.sum())
    precision = (1.0 if ng == 0 else 0.0) if np_ == 0 else inter / np_
    recall = 1.0 if ng == 0 else inter / ng
    return precision, recall


def f_beta(precision: float, recall: float, beta_sq: float = 0.3) -> float:
    """(1 + b^2) P R / (b^2 P + R); 0 when the denominator vanishes."""
    den = beta_sq * precision + recall
    if den == 0.0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / den


def adaptive_threshold(sal) -> float:
    """min(2 * mean, 1); binarization everywhere uses the strict sal > t rule."""
    sal = _as_saliency(sal)
    return min(2.0 * float(sal.mean()), 1.0)


def e_measure(binarized, gt) -> float:
    """Enhanced-alignment score: mean of ((2 a g / (a^2 + g^2)) + 1)^2 / 4 on
    mean-centered maps; all-foreground/all-background ground truth degenerates
    to the matching-pixel fraction."""
    pred = _as_binary(binarized, "binarized")
    gt = _as_binary(gt, "gt")
    _check_dims(pred, gt)
    n = gt.size
    gt_fg = int(gt.sum())
    pred_fg = int(pred.sum())
    if gt_fg == 0:
        enhanced_sum = n - pred_fg
    elif gt_fg == n:
        enhanced_sum = pred_fg
    else:
        a = pred.astype(np.float64) - pred_fg / n
        g = gt.astype(np.float64) - gt_fg / n
        align = 2.0 * a * g / (a * a + g * g + _EPS)
        enhanced_sum = float(np.sum((align + 1.0) ** 2 / 4.0))
    return float(enhanced_sum / n)


def _object_score(values: np.ndarray) -> float:
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _region_ssim(pred_q: np.ndarray, gt_q: np.ndarray) -> float:
    n = pred_q.size
    if n == 0:
        return 0.0  # empty quadrant carries zero weight anyway
    x = float(pred_q.mean())
    y = float(gt_q.mean())
    div = n - 1 + _EPS
    sigma_x = float(np.sum((pred_q - x) ** 2)) / div
    sigma_y = float(np.sum((gt_q - y) ** 2)) / div
    sigma_xy = float(np.sum((pred_q - x) * (gt_q - y))) / div
    num = 4.0 * x * y * sigma_xy
    den = (x * x + y * y) * (sigma_x + sigma_y)
    if num != 0.0:
        return num / (den + _EPS)
    return 1.0 if den == 0.0 else 0.0


def s_measure(sal, gt, alpha: float = 0.5) -> float:
    """Structure measure alpha * S_object + (1 - alpha) * S_region, clamped
    to [0, 1]; empty/full ground truth degenerates to 1 - mean / mean."""
    sal = _as_saliency(sal)
    gt = _as_binary(gt, "gt")
    _check_dims(sal, gt)
    y = float(gt.mean())
    if y == 0.0:
        return float(np.clip(1.0 - sal.mean(), 0.0, 1.0))
    if y == 1.0:
        return float(np.clip(sal.mean(), 0.0, 1.0))

    # object component: foreground/background mean-dissimilarity, weighted by
    # the foreground ratio
    o_fg = _object_score(sal[gt])
    o_bg = _object_score(1.0 - sal[~gt])
    s_object = y * o_fg + (1.0 - y) * o_bg

    # region component: quadrant split at the (1-based) ground-truth centroid
    h, w = gt.shape
    cy, cx = np.argwhere(gt).mean(axis=0).round()
    px, py = int(cx) + 1, int(cy) + 1
    area = h * w
    quads = [
        (slice(0, py), slice(0, px), px * py / area),
        (slice(0, py), slice(px, w), py * (w - px) / area),
        (slice(py, h), slice(0, px), (h - py) * px / area),
        (slice(py, h), slice(px, w), 0.0),  # weight filled below
    ]
    w4 = 1.0 - sum(q[2] for q in quads[:3])
    quads[3] = (quads[3][0], quads[3][1], w4)
    s_region = sum(
        wt * _region_ssim(sal[sy, sx], gt[sy, sx].astype(np.float64))
        for sy, sx, wt in quads
    )

    return float(np.clip(alpha * s_object + (1.0 - alpha) * s_region, 0.0, 1.0))


def mae(sal, gt) -> float:
    """Mean absolute difference between the map and the binary ground truth."""
    sal = _as_saliency(sal)
    gt = _as_binary(gt, "gt")
    _check_dims(sal, gt)
    return float(np.mean(np.abs(sal - gt.astype(np.float64))))


def threshold_sweep(sal, gt, beta_sq: float = 0.3) -> np.ndarray:
    """Binarize at t = i/255 for i in 0..255 (strict >) and report
    (precision, recall, F, E) per threshold as a [256, 4] array."""
    sal = _as_saliency(sal)
    gt = _as_binary(gt, "gt")
    _check_dims(sal, gt)
    curve = np.zeros((NUM_THRESHOLDS, 4), dtype=np.float64)
    for i in range(NUM_THRESHOLDS):
        t = i / 255.0
        binarized = sal > t
        p, r = precision_recall(binarized, gt)
        curve[i] = (p, r, f_beta(p, r, beta_sq), e_measure(binarized, gt))
    return curve


@dataclass
class MetricReport:
    s_measure: float
    f_mean: float
    f_max: float
    f_adaptive: float
    e_mean: float
    e_max: float
    e_adaptive: float
    mae: float
    threshold_curve: np.ndarray = field(repr=False)

    def as_dict(self, with_curve: bool = False) -> dict:
        out = {
            "s_measure": self.s_measure,
            "f_mean": self.f_mean,
            "f_max": self.f_max,
            "f_adaptive": self.f_adaptive,
            "e_mean": self.e_mean,
            "e_max": self.e_max,
            "e_adaptive": self.e_adaptive,
            "mae": self.mae,
        }
        if with_curve:
            out["threshold_curve"] = [
                {"precision": p, "recall": r, "f": f, "e": e}
                for p, r, f, e in self.threshold_curve.tolist()
            ]
        return out


def evaluate_saliency(sal, gt, alpha: float = 0.5, beta_sq: float = 0.3) -> MetricReport:
    """Full per-image report: S, mean/max/adaptive F and E, MAE, and the
    256-point threshold curve."""
    sal = _as_saliency(sal)
    gt = _as_binary(gt, "gt")
    _check_dims(sal, gt)
    curve = threshold_sweep(sal, gt, beta_sq)
    t_adp = adaptive_threshold(sal)
    adp_bin = sal > t_adp
    p_adp, r_adp = precision_recall(adp_bin, gt)
    return MetricReport(
        s_measure=s_measure(sal, gt, alpha),
        f_mean=float(curve[:, 2].mean()),
        f_max=float(curve[:, 2].max()),
        f_adaptive=f_beta(p_adp, r_adp, beta_sq),
        e_mean=float(curve[:, 3].mean()),
        e_max=float(curve[:, 3].max()),
        e_adaptive=e_measure(adp_bin, gt),
        mae=mae(sal, gt),
        threshold_curve=curve,
    )


@dataclass
class DetectionSet:
    predictions: list[ScoredInstance]
    ground_truths: list[np.ndarray]

    def __post_init__(self) -> None:
        self.ground_truths = [_as_binary(g, "ground truth") for g in self.ground_truths]
        shapes = {g.shape for g in self.ground_truths}
        shapes |= {p.mask.shape for p in self.predictions}
        if len(shapes) > 1:
            raise ValueError(f"all masks must share dimensions, got {sorted(shapes)}")


def _greedy_match(dets: DetectionSet, iou_floor: float = 0.5):
    """Score-descending greedy one-to-one matching; returns per-prediction hit
    flags (aligned with the ranking) and matched IoUs."""
    order = sorted(
        range(len(dets.predictions)), key=lambda i: (-dets.predictions[i].score, i)
    )
    taken = [False] * len(dets.ground_truths)
    hits, matched_ious = [], []
    for idx in order:
        pred = dets.predictions[idx]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(dets.ground_truths):
            if taken[j]:
                continue
            iou = mask_iou(pred.mask, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_floor:
            taken[best_j] = True
            hits.append(True)
            matched_ious.append(best_iou)
        else:
            hits.append(False)
    return hits, matched_ious


def ap50(dets: DetectionSet) -> tuple[float, float]:
    """All-point average precision at IoU >= 0.5 plus the mean IoU over
    matched pairs only (0 when nothing matched)."""
    if not dets.ground_truths:
        raise ValueError("ap50 requires at least one ground-truth mask")
    hits, matched_ious = _greedy_match(dets)
    n_gt = len(dets.ground_truths)
    ap = 0.0
    tp = 0
    prev_recall = 0.0
    for n, hit in enumerate(hits, start=1):
        tp += int(hit)
        precision = tp / n
        recall = tp / n_gt
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    mean_iou = float(np.mean(matched_ious)) if matched_ious else 0.0
    return float(ap), mean_iou


def detection_report(dets: DetectionSet) -> dict:
    """Precision, recall, F1 (at the 0.5-IoU match), AP50, matched mean IoU."""
    if not dets.ground_truths:
        raise ValueError("detection_report requires at least one ground-truth mask")
    hits, matched_ious = _greedy_match(dets)
    tp = sum(hits)
    n_pred = len(dets.predictions)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / len(dets.ground_truths)
    f1 = f_beta(precision, recall, beta_sq=1.0)
    ap, mean_iou = ap50(dets)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "ap50": ap,
        "matched_iou_mean": mean_iou,
        "matched_count": len(matched_ious),
        "num_predictions": n_pred,
        "num_ground_truths": len(dets.ground_truths),
    }
