"""RGB projection of spectral cubes and 8-bit image export.

The projection integrates the cube against analytic fits of the CIE 1931
color-matching functions (piecewise-Gaussian lobes), maps XYZ to linear
sRGB, clips, max-normalizes, and applies a 1/2.2 gamma. Absolute radiance
is intentionally discarded: doubling the cube leaves the image unchanged.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

from .core import HsiCube, SpectralGrid

VISIBLE_RANGE_NM = (380.0, 780.0)

# piecewise-Gaussian lobes (amplitude, center nm, sigma left, sigma right)
_X_LOBES = ((1.056, 599.8, 37.9, 31.0), (0.362, 442.0, 16.0, 26.7),
            (-0.065, 501.1, 20.4, 26.2))
_Y_LOBES = ((0.821, 568.8, 46.9, 40.5), (0.286, 530.9, 16.3, 31.1))
_Z_LOBES = ((1.217, 437.0, 11.8, 36.0), (0.681, 459.0, 26.0, 13.8))

_XYZ_TO_LINEAR_SRGB = np.array([
    [3.2406, -1.5372, -0.4986],
    [-0.9689, 1.8758, 0.0415],
    [0.0557, -0.2040, 1.0570],
])


def _lobe_sum(wavelengths: np.ndarray, lobes) -> np.ndarray:
    wl = np.asarray(wavelengths, dtype=np.float64)
    total = np.zeros_like(wl)
    for amp, center, sig_lo, sig_hi in lobes:
        sigma = np.where(wl < center, sig_lo, sig_hi)
        total += amp * np.exp(-0.5 * ((wl - center) / sigma) ** 2)
    return total


def cie_xyz_weights(grid: SpectralGrid) -> np.ndarray:
    """(3, C) color-matching weights sampled at the grid's band centers."""
    wl = grid.wavelengths
    return np.stack([
        _lobe_sum(wl, _X_LOBES),
        _lobe_sum(wl, _Y_LOBES),
        _lobe_sum(wl, _Z_LOBES),
    ])


def rgb_project(cube) -> np.ndarray:
    """Project a cube to a gamma-encoded RGB image in [0, 1].

    The spectral grid must lie inside the visible range 380-780 nm.
    """
    if isinstance(cube, HsiCube):
        grid, data = cube.grid, cube.data
    else:
        raise TypeError("rgb_project needs an HsiCube (the grid fixes the colors)")
    lo, hi = VISIBLE_RANGE_NM
    if grid.wavelengths[0] < lo or grid.wavelengths[-1] > hi:
        raise ValueError(f"spectral grid must lie within [{lo:.0f}, {hi:.0f}] nm")
    weights = cie_xyz_weights(grid)
    xyz = np.tensordot(data.astype(np.float64), weights, axes=([2], [1]))
    rgb = np.tensordot(xyz, _XYZ_TO_LINEAR_SRGB, axes=([2], [1]))
    rgb = np.maximum(rgb, 0.0)
    peak = float(rgb.max())
    if peak > 0:
        rgb /= peak
    return rgb ** (1.0 / 2.2)


def to_u8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half up via +0.5 truncation."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return (arr * 255.0 + 0.5).astype(np.uint8)


def normalize_image(values: np.ndarray) -> np.ndarray:
    """Map an arbitrary nonnegative array onto [0, 1] by its peak."""
    arr = np.asarray(values, dtype=np.float64)
    peak = float(arr.max()) if arr.size else 0.0
    return arr / peak if peak > 0 else np.zeros_like(arr)


_HEAT_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_HEAT_COLORS = np.array([
    [0.0, 0.0, 0.0],
    [0.2, 0.0, 0.4],
    [0.8, 0.2, 0.2],
    [1.0, 0.7, 0.1],
    [1.0, 1.0, 1.0],
])


def heatmap(values: np.ndarray) -> np.ndarray:
    """Scalar field to a dark-to-hot RGB rendering in [0, 1]."""
    t = normalize_image(values)
    return np.stack([np.interp(t, _HEAT_STOPS, _HEAT_COLORS[:, c]) for c in range(3)],
                    axis=-1)


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG export; 2-D arrays become grayscale, (H, W, 3) become RGB."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_u8(arr)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    elif arr.ndim == 3 and arr.shape[2] == 3:
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise ValueError(f"cannot write image of shape {arr.shape}")
