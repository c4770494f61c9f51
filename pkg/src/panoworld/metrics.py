"""Desk-scale evaluation metrics."""

from __future__ import annotations

import math

import numpy as np

from .geometry import EquirectPanorama


class MetricError(ValueError):
    pass


def psnr(a, b, mask=None, peak: float = 255.0) -> float:
    """PSNR over the masked pixels.  Identical inputs give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise MetricError("mask must match the image size")
    if not mask.any():
        raise MetricError("PSNR is undefined on an empty mask")
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def coverage(pano: EquirectPanorama) -> float:
    return pano.coverage()
