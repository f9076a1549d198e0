"""Full-reference image quality metrics and the Gaussianity distance.

PSNR uses the standard 10*log10(MAX^2/MSE) with MAX = 1.0 on the internal
scale. SSIM follows the original publication: 11x11 Gaussian window with
std 1.5, k1 = 0.01, k2 = 0.03, per-channel then averaged. MAE is reported
on the 0-255 scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve
from scipy.stats import norm

from .errors import ParameterError
from .imagecore import Image, NoiseField

__all__ = [
    "PSNR_INF",
    "MetricRecord",
    "psnr",
    "ssim",
    "mae",
    "wasserstein_to_gaussian",
    "records_to_csv",
    "records_to_json",
]

PSNR_INF = math.inf  # sentinel for identical images (zero MSE)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(x: Image, y: Image) -> None:
    if x.pixels.shape != y.pixels.shape:
        raise ParameterError(
            f"shape mismatch: {x.pixels.shape} vs {y.pixels.shape}"
        )


def psnr(x: Image, y: Image) -> float:
    """Peak signal-to-noise ratio in dB; PSNR_INF for identical images."""
    _check_pair(x, y)
    mse = float(np.mean((x.pixels - y.pixels) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    # 'valid'-style local statistics: filter with the 11x11 Gaussian window,
    # then keep only positions where the window fits entirely.
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    half = SSIM_WINDOW // 2

    def filt(a: np.ndarray) -> np.ndarray:
        out = convolve(a, _SSIM_KERNEL, mode="constant")
        return out[half:-half, half:-half]

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(x: Image, y: Image) -> float:
    """Mean local structural similarity over an 11x11 Gaussian window."""
    _check_pair(x, y)
    if x.height < SSIM_WINDOW or x.width < SSIM_WINDOW:
        raise ParameterError(
            f"image {x.height}x{x.width} smaller than SSIM window {SSIM_WINDOW}"
        )
    vals = [
        _ssim_channel(x.pixels[:, :, c], y.pixels[:, :, c]) for c in range(x.channels)
    ]
    return float(np.mean(vals))


def mae(x: Image, y: Image) -> float:
    """Mean absolute error on the 0-255 scale."""
    _check_pair(x, y)
    return 255.0 * float(np.mean(np.abs(x.pixels - y.pixels)))


def wasserstein_to_gaussian(n: NoiseField, sigma: float) -> float:
    """W1 distance between the value marginal of ``n`` and N(0, (sigma/255)^2).

    Computed by sorting the samples against equiprobable Gaussian quantiles
    Phi^-1((i - 0.5)/N) * sigma/255 and averaging the absolute differences.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    values = np.sort(n.values.ravel())
    count = values.size
    if count == 0:
        raise ParameterError("empty noise field")
    probs = (np.arange(count) + 0.5) / count
    quantiles = norm.ppf(probs) * (sigma / 255.0)
    return float(np.mean(np.abs(values - quantiles)))


@dataclass(frozen=True)
class MetricRecord:
    """One reference/candidate comparison; serializes to CSV and JSON rows."""

    reference_id: str
    candidate_id: str
    psnr: float
    ssim: float
    mae: float

    @classmethod
    def measure(cls, reference: Image, candidate: Image) -> "MetricRecord":
        return cls(
            reference_id=reference.id,
            candidate_id=candidate.id,
            psnr=psnr(reference, candidate),
            ssim=ssim(reference, candidate),
            mae=mae(reference, candidate),
        )

    def to_json_row(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "candidate_id": self.candidate_id,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mae": self.mae,
        }


CSV_COLUMNS = ("reference_id", "candidate_id", "psnr", "ssim", "mae")


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def records_to_csv(records: list[MetricRecord], path) -> None:
    """Fixed column order, numeric fields at 4 decimal places."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [r.reference_id, r.candidate_id, _fmt(r.psnr), _fmt(r.ssim), _fmt(r.mae)]
            )


def records_to_json(records: list[MetricRecord], path) -> None:
    Path(path).write_text(
        json.dumps([r.to_json_row() for r in records], indent=2) + "\n"
    )
