"""Image- and pixel-level anomaly detection metrics.

AUROC, AP and F1-max are computed by an exact sweep over the distinct score
values. The PRO curve averages, per threshold, the covered fraction of every
ground-truth connected region (8-connectivity) and plots it against the
false-positive rate over all normal pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError

AUPRO_CAPS = (0.01, 0.05, 0.10, 0.30)


@dataclass
class EvalBatch:
    image_scores: np.ndarray
    image_labels: np.ndarray
    pixel_maps: list | None = None
    pixel_masks: list | None = None

    def __post_init__(self):
        self.image_scores = np.asarray(self.image_scores, dtype=np.float64)
        self.image_labels = np.asarray(self.image_labels).astype(int)
        if self.image_scores.shape != self.image_labels.shape:
            raise ValidationError("image scores and labels have different lengths")
        if not np.isin(self.image_labels, (0, 1)).all():
            raise ValidationError("image labels must be binary")
        if self.pixel_maps is not None:
            if self.pixel_masks is None or len(self.pixel_maps) != len(self.pixel_masks):
                raise ValidationError("pixel maps and masks are not aligned")
            if len(self.pixel_maps) != len(self.image_scores):
                raise ValidationError("pixel maps and image scores are not aligned")


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary")
    return scores, labels.astype(bool)


def auroc(scores, labels):
    """Mann-Whitney form: ``P(s+ > s-) + P(s+ = s-) / 2``."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sweep(scores, labels):
    """Cumulative (tp, fp) at each distinct threshold, strictest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return tps.astype(np.float64), fps.astype(np.float64), s[last]


def average_precision(scores, labels):
    """Step-wise AP: ``sum_k (R_k - R_{k-1}) * P_k`` over descending thresholds."""
    scores, labels = _prepare(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive label")
    tps, fps, _ = _sweep(scores, labels)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(scores, labels):
    """Largest F1 over all thresholds ``score >= t``."""
    scores, labels = _prepare(scores, labels)
    n_pos = labels.sum()
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive label")
    tps, fps, _ = _sweep(scores, labels)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


# --------------------------------------------------------------------------
# per-region overlap

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class ProCurve:
    fpr: np.ndarray
    pro: np.ndarray
    thresholds: np.ndarray


def _anchor(fpr, pro, thresholds):
    at_zero = fpr <= 0
    if at_zero.any():
        k = np.flatnonzero(at_zero)[np.argmax(pro[at_zero])]
        start, t0 = pro[k], thresholds[k]
    else:
        start, t0 = 0.0, np.inf
    keep = ~at_zero
    return np.r_[0.0, fpr[keep]], np.r_[start, pro[keep]], np.r_[t0, thresholds[keep]]


def pro_curve(pixel_maps, pixel_masks, fpr_grid=None, bins=None) -> ProCurve:
    """PRO against FPR, swept over all distinct scores (or ``bins`` levels).

    The returned curve starts at ``(0, PRO of the strictest FPR-free threshold)``
    and ends at ``(1, 1)``. With ``fpr_grid`` the curve is linearly resampled.
    """
    scores, weights, negatives = [], [], []
    n_regions = 0
    for amap, mask in zip(pixel_maps, pixel_masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ValidationError(f"map {amap.shape} and mask {mask.shape} differ in shape")
        labels, k = ndimage.label(mask, structure=EIGHT_CONNECTED)
        w = np.zeros(amap.shape)
        if k:
            sizes = np.bincount(labels.ravel(), minlength=k + 1).astype(np.float64)
            w[mask] = 1.0 / sizes[labels[mask]]
        n_regions += k
        scores.append(amap.ravel())
        weights.append(w.ravel())
        negatives.append((~mask).ravel())
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    scores = np.concatenate(scores)
    weights = np.concatenate(weights) / n_regions
    negatives = np.concatenate(negatives)
    n_neg = negatives.sum()
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs normal pixels to define the false-positive rate")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    cum_pro = np.cumsum(weights[order])
    cum_neg = np.cumsum(negatives[order])
    cum_pos = np.cumsum(~negatives[order])
    if bins is None:
        thresholds = s[np.r_[np.nonzero(np.diff(s))[0], s.size - 1]]
    else:
        thresholds = np.linspace(s[0], s[-1], int(bins))
    # number of pixels with score >= t
    counts = np.searchsorted(-s, -thresholds, side="right")
    valid = counts > 0
    thresholds, counts = thresholds[valid], counts[valid]
    fpr = cum_neg[counts - 1] / n_neg
    pro = np.clip(cum_pro[counts - 1], 0.0, 1.0)
    # summed 1/size weights drift by an ulp; full coverage is exactly 1
    pro[cum_pos[counts - 1] == cum_pos[-1]] = 1.0
    fpr, pro, thresholds = _anchor(fpr, pro, thresholds)
    if fpr_grid is not None:
        grid = np.asarray(fpr_grid, dtype=np.float64)
        return ProCurve(grid, _interp_curve(fpr, pro, grid), np.full(grid.shape, np.nan))
    return ProCurve(fpr, pro, thresholds)


def _interp_curve(fpr, pro, x):
    out = np.empty_like(x)
    for k, xv in enumerate(x):
        out[k] = _value_at(fpr, pro, xv)
    return out


def _value_at(fpr, pro, x):
    right = np.searchsorted(fpr, x, side="right")
    if right >= fpr.size:
        return float(pro[-1])
    left = right - 1
    if fpr[left] == x:
        return float(pro[left])
    t = (x - fpr[left]) / (fpr[right] - fpr[left])
    return float(pro[left] + t * (pro[right] - pro[left]))


def aupro(curve: ProCurve, cap=0.30):
    """Trapezoidal area under PRO on ``[0, cap]``, divided by ``cap``."""
    if not 0 < cap <= 1:
        raise ValidationError(f"FPR cap must lie in (0, 1], got {cap}")
    f, p = curve.fpr, curve.pro
    inside = f <= cap
    fx, px = f[inside], p[inside]
    if fx[-1] < cap:
        fx = np.r_[fx, cap]
        px = np.r_[px, _value_at(f, p, cap)]
    return float(np.sum(np.diff(fx) * (px[1:] + px[:-1]) / 2.0) / cap)


# --------------------------------------------------------------------------
# density estimate


def scott_bandwidth(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    bw = 1.06 * sd * values.size ** (-0.2)
    return bw if bw > 0 else 1e-3


def kde(values, bandwidth=None, grid_size=512, pad=4.0):
    """Gaussian KDE evaluated on ``[min - pad*bw, max + pad*bw]``; returns ``(grid, density)``."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("KDE needs at least one value")
    bw = scott_bandwidth(values) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise ValidationError(f"bandwidth must be positive, got {bw}")
    grid = np.linspace(values.min() - pad * bw, values.max() + pad * bw, grid_size)
    z = (grid[:, None] - values[None, :]) / bw
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (values.size * bw * np.sqrt(2 * np.pi))
    return grid, dens


# --------------------------------------------------------------------------
# full protocol

COLUMNS = ("I-AUROC", "I-AP", "I-F1-max", "P-AUROC", "P-AP", "P-F1-max",
           "AUPRO@1%", "AUPRO@5%", "AUPRO@10%", "AUPRO@30%")


def evaluate(batch: EvalBatch, caps=AUPRO_CAPS, pixel=True):
    """All metrics as ``{column: value}``; pixel metrics only when masks are available."""
    out = {
        "I-AUROC": auroc(batch.image_scores, batch.image_labels),
        "I-AP": average_precision(batch.image_scores, batch.image_labels),
        "I-F1-max": f1_max(batch.image_scores, batch.image_labels),
    }
    if pixel and batch.pixel_maps is not None:
        flat_s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in batch.pixel_maps])
        flat_y = np.concatenate([np.asarray(m).astype(int).ravel() for m in batch.pixel_masks])
        out["P-AUROC"] = auroc(flat_s, flat_y)
        out["P-AP"] = average_precision(flat_s, flat_y)
        out["P-F1-max"] = f1_max(flat_s, flat_y)
        curve = pro_curve(batch.pixel_maps, batch.pixel_masks)
        for cap in caps:
            out[f"AUPRO@{round(cap * 100)}%"] = aupro(curve, cap)
    return out
