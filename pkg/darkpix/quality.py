"""
Reference image-quality metrics: PSNR and Gaussian-window SSIM.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
from scipy.ndimage import gaussian_filter

from .utils import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    """PSNR/SSIM of one image pair."""

    psnr_db: float
    ssim: float
    peak: float
    capped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'psnr_db': float(self.psnr_db),
            'ssim': float(self.ssim),
            'peak': float(self.peak),
            'capped': bool(self.capped),
        }


def _check(a, b, peak):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ValidationError(f"peak must be positive, got {peak}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB."""
    a, b = _check(a, b, peak)
    mse = float(np.mean((a - b) ** 2))
    if not np.isfinite(mse):
        return float("nan")
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def ssim(a, b, peak: float = 1.0) -> float:
    """
    Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Local statistics come from a separable Gaussian filter truncated at the
    window radius; the mean is taken over positions where the window lies
    fully inside the image.
    """
    a, b = _check(a, b, peak)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionMismatchError(
            f"SSIM needs a 2D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0

    radius = SSIM_WINDOW // 2
    truncate = radius / SSIM_SIGMA

    def blur(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=truncate, mode='reflect')

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b

    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    inner = ssim_map[radius:-radius, radius:-radius]
    return float(np.clip(inner.mean(), -1.0, 1.0))


def compare(a, b, peak: float = 1.0) -> MetricReport:
    """PSNR and SSIM of one pair."""
    value = psnr(a, b, peak)
    return MetricReport(psnr_db=value, ssim=ssim(a, b, peak), peak=peak,
                        capped=value >= PSNR_CAP_DB)
