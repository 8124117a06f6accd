"""Image quality metrics: PSNR, SSIM and mean contrast recovery.

The evaluation protocol normalizes reference and reconstruction to a
maximum of one before scoring, so PSNR uses a data range of 1 and SSIM uses
the standard constants for unit range.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

__all__ = [
    "normalize_max1",
    "psnr",
    "ssim",
    "mcrc",
    "SampleScores",
    "MetricsReport",
    "mean_std_text",
]

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def normalize_max1(image):
    """Scale an image so its maximum is exactly 1; rejects all-zero input."""
    image = np.asarray(image, dtype=np.float64)
    peak = image.max()
    if peak <= 0:
        raise ValueError("cannot normalize an image with no positive values")
    return image / peak


def _check_pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test):
    """Peak signal-to-noise ratio in dB for unit data range.

    Identical images return ``math.inf``.
    """
    ref, test = _check_pair(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window():
    offsets = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-0.5 * (offsets / _SSIM_SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(ref, test):
    """Mean local structural similarity with an 11x11 Gaussian window.

    Uses sigma 1.5 and constants K1=0.01, K2=0.03 for data range 1; window
    statistics are taken over fully valid positions only.
    """
    ref, test = _check_pair(ref, test)
    if min(ref.shape) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels per side")
    window = _ssim_window()
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2

    mu_r = convolve2d(ref, window, mode="valid")
    mu_t = convolve2d(test, window, mode="valid")
    var_r = convolve2d(ref * ref, window, mode="valid") - mu_r * mu_r
    var_t = convolve2d(test * test, window, mode="valid") - mu_t * mu_t
    cov = convolve2d(ref * test, window, mode="valid") - mu_r * mu_t

    numerator = (2.0 * mu_r * mu_t + c1) * (2.0 * cov + c2)
    denominator = (mu_r * mu_r + mu_t * mu_t + c1) * (var_r + var_t + c2)
    return float(np.mean(numerator / denominator))


def mcrc(recons, truths, lesion_masks):
    """Mean contrast recovery: average of per-sample lesion uptake ratios.

    Each sample contributes the mean reconstructed value over its lesion
    pixels divided by the mean true value over the same pixels.  Samples
    with an empty mask are skipped with a warning; all-empty input is
    rejected.
    """
    ratios = []
    for index, (recon, truth, mask) in enumerate(zip(recons, truths, lesion_masks)):
        mask = np.asarray(mask) > 0
        if not mask.any():
            warnings.warn(f"sample {index} has an empty lesion mask; skipped")
            continue
        recon = np.asarray(recon, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        true_uptake = truth[mask].mean()
        if true_uptake == 0:
            warnings.warn(f"sample {index} has zero true lesion uptake; skipped")
            continue
        ratios.append(recon[mask].mean() / true_uptake)
    if not ratios:
        raise ValueError("no sample had a usable lesion mask")
    return float(np.mean(ratios))


def mean_std_text(values):
    """Render values as the usual ``mean±std`` table cell."""
    values = np.asarray(values, dtype=np.float64)
    std = values.std(ddof=0) if values.size > 1 else 0.0
    return f"{values.mean():.2f}±{std:.2f}"


@dataclass
class SampleScores:
    sample_id: str
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    """Per-sample scores plus aggregates for one method on one dataset."""

    method: str
    count_level: float
    samples: list = field(default_factory=list)
    mcrc: float = float("nan")

    @property
    def psnr_values(self):
        return np.array([s.psnr for s in self.samples])

    @property
    def ssim_values(self):
        return np.array([s.ssim for s in self.samples])

    def to_dict(self):
        return {
            "method": self.method,
            "count_level": self.count_level,
            "samples": [
                {"sample_id": s.sample_id, "psnr": s.psnr, "ssim": s.ssim}
                for s in self.samples
            ],
            "psnr_mean": float(self.psnr_values.mean()),
            "psnr_std": float(self.psnr_values.std(ddof=0)),
            "ssim_mean": float(self.ssim_values.mean()),
            "ssim_std": float(self.ssim_values.std(ddof=0)),
            "mcrc": self.mcrc,
            "psnr_text": mean_std_text(self.psnr_values),
            "ssim_text": mean_std_text(self.ssim_values),
        }

    def csv_rows(self):
        rows = [
            f"{self.method},{self.count_level!r},{s.sample_id},{s.psnr!r},{s.ssim!r},"
            for s in self.samples
        ]
        rows.append(
            f"{self.method},{self.count_level!r},aggregate,"
            f"{float(self.psnr_values.mean())!r},{float(self.ssim_values.mean())!r},{self.mcrc!r}"
        )
        return rows
