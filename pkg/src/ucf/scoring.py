"""Inference-time post-processing of anomaly maps."""

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DomainError, ValidationError


def upsample(amap, target):
    """Bilinear resize (half-pixel centres, edge-clamped) of a 2-D map to ``target``."""
    amap = np.asarray(amap)
    if amap.shape == tuple(target):
        return amap.copy()
    t = torch.from_numpy(np.ascontiguousarray(amap, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)[0, 0].numpy()
    return out.astype(amap.dtype if amap.dtype.kind == "f" else np.float64)


def fuse(m, m_baseline, lam, prenormalize=False):
    """Convex combination ``lam * m + (1 - lam) * m_baseline``."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    m = np.asarray(m)
    m_baseline = np.asarray(m_baseline)
    if m.shape != m_baseline.shape:
        raise ValidationError(f"maps differ in shape: {m.shape} vs {m_baseline.shape}")
    if prenormalize:
        m, m_baseline = normalize_for_view(m), normalize_for_view(m_baseline)
    return lam * m + (1.0 - lam) * m_baseline


def image_score(amap, k=250):
    """Mean of the ``min(k, size)`` largest values of the map."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    flat = np.asarray(amap, dtype=np.float64).ravel()
    k = min(k, flat.size)
    top = np.partition(flat, flat.size - k)[flat.size - k:]
    return float(np.sort(top).mean())


def gaussian_smooth(amap, sigma):
    """Separable Gaussian filter with reflect padding (truncated at 4 sigma)."""
    amap = np.asarray(amap, dtype=np.float64)
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return amap.copy()
    return ndimage.gaussian_filter(amap, sigma, mode="reflect", truncate=4.0)


def normalize_for_view(amap):
    """Min-max scale to ``[0, 1]``; a constant map becomes all zeros."""
    amap = np.asarray(amap, dtype=np.float64)
    lo, hi = amap.min(), amap.max()
    if hi - lo <= 0:
        return np.zeros_like(amap)
    return (amap - lo) / (hi - lo)
