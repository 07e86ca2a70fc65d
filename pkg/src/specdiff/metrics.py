"""Cube-level quality metrics and uncertainty-aware variants.

All reductions run in float64. PSNR uses the shared peak over both cubes
in the numerator; SSIM is the standard single-band Gaussian-window form
averaged over bands.
"""
from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.signal import fftconvolve

from .core import HsiCube

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    """PSNR (dB), SAM (radians), optional SSIM, mask fraction, Pearson r."""

    psnr_db: float
    sam_rad: float
    ssim: float | None = None
    kept_fraction: float | None = None
    pearson_r: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.sam_rad <= np.pi or np.isnan(self.sam_rad)):
            raise ValueError("SAM must lie in [0, pi]")
        if self.ssim is not None and not -1.0 <= self.ssim <= 1.0:
            raise ValueError("SSIM must lie in [-1, 1]")
        if self.kept_fraction is not None and not 0.0 < self.kept_fraction <= 1.0:
            raise ValueError("kept fraction must lie in (0, 1]")
        if self.pearson_r is not None and not -1.0 <= self.pearson_r <= 1.0:
            raise ValueError("Pearson r must lie in [-1, 1]")


def _cube_data(x) -> np.ndarray:
    data = x.data if isinstance(x, HsiCube) else np.asarray(x)
    if data.ndim != 3:
        raise ValueError(f"expected an (H, W, C) cube, got shape {data.shape}")
    return data.astype(np.float64)


def _pair(x, ref) -> tuple:
    a, b = _cube_data(x), _cube_data(ref)
    if a.shape != b.shape:
        raise ValueError(f"cube shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(x, estimate, mask: np.ndarray | None = None) -> float:
    """Mean over bands of 10*log10(peak / MSE_band).

    The peak is the maximum over both whole cubes (a shared normalizer, so
    the score is comparable across bands). Identical cubes return +inf.
    """
    a, b = _pair(x, estimate)
    peak = max(float(a.max()), float(b.max()))
    sq = (a - b) ** 2
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise ValueError("mask shape must be (H, W)")
        sq = sq[mask]
        if sq.size == 0:
            raise ValueError("mask retains no pixels")
        mse = sq.mean(axis=0)
    else:
        mse = sq.mean(axis=(0, 1))
    if peak <= 0.0 or np.any(mse == 0.0):
        return float("inf")
    return float(np.mean(10.0 * np.log10(peak / mse)))


def sam(x, estimate, mask: np.ndarray | None = None) -> float:
    """Mean spectral angle in radians.

    Pixels with a zero spectrum in either cube are excluded; if more than
    1% are excluded a warning reports the fraction.
    """
    a, b = _pair(x, estimate)
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise ValueError("mask shape must be (H, W)")
        a = a[mask]
        b = b[mask]
    else:
        a = a.reshape(-1, a.shape[2])
        b = b.reshape(-1, b.shape[2])
    dot = np.sum(a * b, axis=1)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    valid = (na > 0) & (nb > 0)
    n_excluded = int(np.count_nonzero(~valid))
    if n_excluded == a.shape[0]:
        raise ValueError("all pixels have a zero spectrum")
    if n_excluded > 0.01 * a.shape[0]:
        warnings.warn(
            f"SAM excluded {n_excluded} zero-spectrum pixels "
            f"({100.0 * n_excluded / a.shape[0]:.2f}%)",
            RuntimeWarning,
        )
    cos = dot[valid] / (na[valid] * nb[valid])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_mean(x, estimate) -> float:
    """Per-band SSIM (11x11 Gaussian window, sigma 1.5), averaged over bands.

    Dynamic range is the shared peak over both cubes; window statistics are
    computed where the window fits entirely inside the image.
    """
    a, b = _pair(x, estimate)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image must be at least {SSIM_WINDOW} pixels on each side")
    peak = max(float(a.max()), float(b.max()))
    if peak <= 0.0:
        raise ValueError("dynamic range is zero")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    window = _gaussian_window()
    scores = []
    for band in range(a.shape[2]):
        xa = a[:, :, band]
        xb = b[:, :, band]
        mu_a = fftconvolve(xa, window, mode="valid")
        mu_b = fftconvolve(xb, window, mode="valid")
        var_a = fftconvolve(xa * xa, window, mode="valid") - mu_a**2
        var_b = fftconvolve(xb * xb, window, mode="valid") - mu_b**2
        cov = fftconvolve(xa * xb, window, mode="valid") - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def uncertainty_mask(uncertainty: np.ndarray, keep: float) -> np.ndarray:
    """Boolean (H, W) mask retaining the keep-fraction lowest-uncertainty
    pixels; ties broken deterministically by (row, col) order."""
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep fraction must lie in (0, 1]")
    unc = np.asarray(uncertainty, dtype=np.float64)
    if unc.ndim != 2:
        raise ValueError("uncertainty map must be 2-D")
    n_keep = int(round(keep * unc.size))
    n_keep = max(1, min(unc.size, n_keep))
    order = np.argsort(unc.ravel(), kind="stable")
    mask = np.zeros(unc.size, dtype=bool)
    mask[order[:n_keep]] = True
    return mask.reshape(unc.shape)


def masked_metrics(x, estimate, uncertainty: np.ndarray, keep: float) -> MetricReport:
    """PSNR/SAM over the lowest-uncertainty keep-fraction of pixels.

    SSIM is omitted: a windowed statistic is undefined on scattered masks.
    """
    mask = uncertainty_mask(uncertainty, keep)
    kept = float(np.count_nonzero(mask)) / mask.size
    return MetricReport(
        psnr_db=psnr(x, estimate, mask=mask),
        sam_rad=sam(x, estimate, mask=mask),
        ssim=None,
        kept_fraction=kept,
    )


def evaluate(x, estimate) -> MetricReport:
    """Full-cube PSNR, SAM, and SSIM in one report."""
    return MetricReport(
        psnr_db=psnr(x, estimate),
        sam_rad=sam(x, estimate),
        ssim=ssim_mean(x, estimate),
    )


def pearson(uncertainty, squared_error, n_subsample: int = 10000, seed: int = 0) -> float:
    """Sample Pearson correlation between per-pixel uncertainty and error.

    Large inputs are subsampled to n_subsample points with a seeded RNG so
    the statistic is reproducible.
    """
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(squared_error, dtype=np.float64).ravel()
    if u.size != e.size:
        raise ValueError("inputs must have the same number of pixels")
    if u.size < 2:
        raise ValueError("need at least two points")
    if u.size > n_subsample:
        idx = np.random.default_rng(seed).choice(u.size, size=n_subsample, replace=False)
        u = u[idx]
        e = e[idx]
    du = u - u.mean()
    de = e - e.mean()
    su = np.sqrt(np.sum(du * du))
    se = np.sqrt(np.sum(de * de))
    if su == 0.0 or se == 0.0:
        raise ValueError("zero variance in one of the inputs")
    return float(np.sum(du * de) / (su * se))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def config_hash(entries: Mapping) -> str:
    """12-hex digest of a run configuration for tagging metric rows."""
    text = "\n".join(f"{k}={entries[k]}" for k in sorted(str(k) for k in entries))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _report_rows(report: MetricReport) -> list:
    rows = [("psnr_db", report.psnr_db), ("sam_rad", report.sam_rad)]
    if report.ssim is not None:
        rows.append(("ssim", report.ssim))
    if report.kept_fraction is not None:
        rows.append(("kept_fraction", report.kept_fraction))
    if report.pearson_r is not None:
        rows.append(("pearson_r", report.pearson_r))
    return rows


def write_report_csv(path, report: MetricReport, run_hash: str = "") -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value", "config_hash"])
        for name, value in _report_rows(report):
            writer.writerow([name, repr(float(value)), run_hash])


def format_report(report: MetricReport) -> str:
    lines = [f"{name:>14}: {value:.6g}" for name, value in _report_rows(report)]
    return "\n".join(lines)
