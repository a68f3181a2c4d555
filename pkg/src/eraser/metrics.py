"""Fidelity metrics and the ground-truth success oracle."""

from __future__ import annotations

import math

import numpy as np

from .images import check_image, check_mask
from .scenes import Triplet

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, region: np.ndarray | None = None, cap: float = PSNR_CAP_DB) -> float:
    """10 log10(1 / MSE) over the region (whole image when absent), capped.

    Images are [0, 1] floats, so MAX = 1. Identical inputs return the cap.
    """
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    if region is not None:
        region = check_mask(region, "region")
        if region.shape != a.shape[:2]:
            raise ValueError("region shape must match the images")
        if region.sum() == 0:
            raise ValueError("region must be nonempty")
        sel = region.astype(bool)
        diff = a[sel].astype(np.float64) - b[sel].astype(np.float64)
    else:
        diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff**2))
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def composite_over_source(edited: np.ndarray, source: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste the unmasked source region over the model output."""
    m3 = check_mask(mask)[:, :, None]
    return (edited * m3 + source * (1.0 - m3)).astype(np.float32)


def oracle_success(
    edited: np.ndarray,
    triplet: Triplet,
    tau_mask: float = 20.0,
    tau_keep: float = 30.0,
) -> bool:
    """Ground-truth proxy for the human judgment on synthetic scenes.

    Success needs the masked region close to the true background (>= tau_mask
    dB) and the unmasked region faithful to the source (>= tau_keep dB).
    """
    if triplet.removed is None:
        raise ValueError("oracle_success needs ground truth")
    inside = psnr(edited, triplet.removed, region=triplet.mask)
    outside = psnr(edited, triplet.source, region=1.0 - triplet.mask)
    return inside >= tau_mask and outside >= tau_keep
