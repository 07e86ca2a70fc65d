"""Measurement rendering: spectral convolution, CASSI shear camera, sensor noise.

Both cameras expose the same linear-operator surface (`forward`, `adjoint`,
`render_patch`, `conditioning_field`) so that guided sampling can treat
them interchangeably.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy import fft as sfft

from .core import HsiCube, Measurement, SpectralGrid, _readonly
from .optics import SpectralPsf

FloatArray = npt.NDArray[np.floating]

RGB_CENTERS_NM = (610.0, 540.0, 470.0)
RGB_SIGMA_NM = 50.0


# ---------------------------------------------------------------------------
# sensor spectral response
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorResponse:
    """Per-channel spectral weights o(lambda), shape (S, C) with S = 1 or 3."""

    grid: SpectralGrid
    weights: FloatArray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.grid.count:
            raise ValueError(f"weights must be (S, {self.grid.count}), got {w.shape}")
        if w.shape[0] not in (1, 3):
            raise ValueError(f"sensor channel count must be 1 or 3, got {w.shape[0]}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if np.any(w.sum(axis=1) <= 0):
            raise ValueError("every channel needs at least one positive weight")
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def channels(self) -> int:
        return int(self.weights.shape[0])

    @classmethod
    def panchromatic(cls, grid: SpectralGrid) -> "SensorResponse":
        """Unit response in every band (grayscale sensor)."""
        return cls(grid=grid, weights=np.ones((1, grid.count)))

    @classmethod
    def rgb(cls, grid: SpectralGrid) -> "SensorResponse":
        """Gaussian R/G/B quantum-efficiency curves centered at 610/540/470 nm."""
        wl = grid.wavelengths
        rows = [np.exp(-0.5 * ((wl - c) / RGB_SIGMA_NM) ** 2) for c in RGB_CENTERS_NM]
        return cls(grid=grid, weights=np.stack(rows))


# ---------------------------------------------------------------------------
# spectral convolution camera
# ---------------------------------------------------------------------------

class ConvolutionOperator:
    """y(u,v,s) = sum_c o(s,c) * (f_c conv x_c), zero-padded linear convolution.

    Kernels are centered at index (K//2, K//2); the output is cropped back
    to the scene size. FFT plans (kernel spectra per padded shape) are
    cached on the instance.
    """

    def __init__(self, psf: SpectralPsf, response: SensorResponse):
        if not psf.grid.matches(response.grid):
            raise ValueError("PSF and sensor response are on different spectral grids")
        self.psf = psf
        self.response = response
        self._spectra: dict = {}

    @property
    def grid(self) -> SpectralGrid:
        return self.psf.grid

    @property
    def bands(self) -> int:
        return self.psf.grid.count

    @property
    def channels(self) -> int:
        return self.response.channels

    @property
    def conditioning_channels(self) -> int:
        return self.response.channels

    def measurement_shape(self, height: int, width: int) -> tuple:
        return (height, width, self.channels)

    def conditioning_field(self, measurement: np.ndarray) -> np.ndarray:
        return np.asarray(measurement)

    def _kernel_spectra(self, pad_shape: tuple, complex_dtype: np.dtype) -> np.ndarray:
        key = (pad_shape, np.dtype(complex_dtype).char)
        got = self._spectra.get(key)
        if got is None:
            kernels = self.psf.kernels.astype(
                np.float32 if complex_dtype == np.complex64 else np.float64
            )
            got = np.stack(
                [sfft.rfft2(kernels[:, :, c], s=pad_shape) for c in range(self.bands)]
            )
            self._spectra[key] = got
        return got

    @staticmethod
    def _work_dtypes(dtype: np.dtype) -> tuple:
        if np.dtype(dtype) == np.float64:
            return np.float64, np.complex128
        return np.float32, np.complex64

    def forward(self, cube: np.ndarray) -> np.ndarray:
        """Render an (H, W, C) cube to an (H, W, S) sensor image."""
        cube = np.asarray(cube)
        if cube.ndim != 3 or cube.shape[2] != self.bands:
            raise ValueError(f"expected (H, W, {self.bands}) cube, got {cube.shape}")
        h, w = cube.shape[:2]
        k = self.psf.kernel_size
        real_t, cplx_t = self._work_dtypes(cube.dtype)
        pad = (sfft.next_fast_len(h + k), sfft.next_fast_len(w + k))
        spectra = self._kernel_spectra(pad, cplx_t)
        weights = self.response.weights
        out = np.zeros((h, w, self.channels), dtype=np.float64)
        lo = k // 2
        for c in range(self.bands):
            spec = sfft.rfft2(cube[:, :, c].astype(real_t, copy=False), s=pad)
            conv = sfft.irfft2(spec * spectra[c], s=pad)[lo : lo + h, lo : lo + w]
            out += weights[:, c] * conv[:, :, None]
        return out.astype(real_t, copy=False)

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        """Transpose of `forward`, mapping an (H, W, S) image to a cube gradient."""
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != self.channels:
            raise ValueError(f"expected (H, W, {self.channels}) image, got {image.shape}")
        h, w = image.shape[:2]
        k = self.psf.kernel_size
        real_t, cplx_t = self._work_dtypes(image.dtype)
        pad = (sfft.next_fast_len(h + k), sfft.next_fast_len(w + k))
        spectra = self._kernel_spectra(pad, cplx_t)
        weights = self.response.weights
        lo = k // 2
        emb = np.zeros(pad, dtype=real_t)
        chan_spectra = []
        for s in range(self.channels):
            emb[:, :] = 0.0
            emb[lo : lo + h, lo : lo + w] = image[:, :, s]
            chan_spectra.append(sfft.rfft2(emb))
        out = np.empty((h, w, self.bands), dtype=real_t)
        for c in range(self.bands):
            mixed = weights[0, c] * chan_spectra[0]
            for s in range(1, self.channels):
                mixed = mixed + weights[s, c] * chan_spectra[s]
            out[:, :, c] = sfft.irfft2(mixed * np.conj(spectra[c]), s=pad)[:h, :w]
        return out

    def render_patch(self, content: np.ndarray, origin: tuple, field_shape: tuple) -> tuple:
        """Measurement footprint of `content` placed alone at `origin`.

        Returns (window, (row0, col0)): the clipped local sensor response
        and its top-left position in the measurement. Placing the window
        into zeros reproduces forward() of the isolated patch.
        """
        content = np.asarray(content)
        h, w = content.shape[:2]
        k = self.psf.kernel_size
        fh, fw = field_shape
        real_t, cplx_t = self._work_dtypes(content.dtype)
        pad = (sfft.next_fast_len(h + k), sfft.next_fast_len(w + k))
        spectra = self._kernel_spectra(pad, cplx_t)
        weights = self.response.weights
        g0r = origin[0] - k // 2
        g0c = origin[1] - k // 2
        r0, r1 = max(g0r, 0), min(g0r + h + k - 1, fh)
        c0, c1 = max(g0c, 0), min(g0c + w + k - 1, fw)
        if r0 >= r1 or c0 >= c1:
            return np.zeros((0, 0, self.channels), dtype=real_t), (0, 0)
        window = np.zeros((r1 - r0, c1 - c0, self.channels), dtype=np.float64)
        rows = slice(r0 - g0r, r1 - g0r)
        cols = slice(c0 - g0c, c1 - g0c)
        for c in range(self.bands):
            spec = sfft.rfft2(content[:, :, c].astype(real_t, copy=False), s=pad)
            conv = sfft.irfft2(spec * spectra[c], s=pad)[rows, cols]
            window += weights[:, c] * conv[:, :, None]
        return window.astype(real_t, copy=False), (r0, c0)


def render(scene: HsiCube, psf: SpectralPsf, response: SensorResponse) -> Measurement:
    """Image a radiance cube through a spectral PSF onto a 1- or 3-channel sensor."""
    if not scene.grid.matches(psf.grid):
        raise ValueError("scene and PSF are on different spectral grids")
    data = ConvolutionOperator(psf, response).forward(scene.data)
    # FFT rounding may leave values a hair below zero.
    return Measurement(data=np.maximum(data, 0.0))


# ---------------------------------------------------------------------------
# CASSI shear camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CassiSpec:
    """Coded-aperture snapshot camera: binary mask plus per-band column shear."""

    mask: npt.NDArray[np.uint8]
    shears: tuple

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise ValueError("mask must be 2-D")
        vals = np.unique(mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask must be binary")
        shears = tuple(int(s) for s in self.shears)
        if len(shears) < 1:
            raise ValueError("need at least one band shear")
        if any(s < 0 for s in shears):
            raise ValueError("shears must be non-negative")
        if any(b <= a for a, b in zip(shears, shears[1:])):
            raise ValueError("shears must be strictly increasing with band index")
        object.__setattr__(self, "mask", _readonly(mask.astype(np.uint8)))
        object.__setattr__(self, "shears", shears)

    @property
    def bands(self) -> int:
        return len(self.shears)

    @property
    def max_shear(self) -> int:
        return self.shears[-1]

    @property
    def measurement_width(self) -> int:
        return int(self.mask.shape[1]) + self.max_shear


def default_cassi(height: int, width: int, bands: int = 28, shear_step: int = 2,
                  density: float = 0.5, seed: int = 0) -> CassiSpec:
    """Random 50%-density mask with shear d_c = shear_step * c.

    The step-2 default reproduces the common 256 -> 310 widening for a
    28-band system.
    """
    rng = np.random.default_rng(seed)
    mask = (rng.random((height, width)) < density).astype(np.uint8)
    return CassiSpec(mask=mask, shears=tuple(shear_step * c for c in range(bands)))


class CassiOperator:
    """Mask-then-shear forward model on a fixed (H, W) scene geometry."""

    def __init__(self, spec: CassiSpec, grid: SpectralGrid | None = None):
        self.spec = spec
        if grid is not None and grid.count != spec.bands:
            raise ValueError("spectral grid band count does not match the shear table")
        self.grid = grid

    @property
    def bands(self) -> int:
        return self.spec.bands

    @property
    def channels(self) -> int:
        return 1

    @property
    def conditioning_channels(self) -> int:
        # desheared conditioning stacks one aligned crop per band
        return self.spec.bands

    def measurement_shape(self, height: int, width: int) -> tuple:
        self._check_scene(height, width)
        return (height, width + self.spec.max_shear, 1)

    def _check_scene(self, height: int, width: int) -> None:
        if (height, width) != self.spec.mask.shape:
            raise ValueError(
                f"scene shape {(height, width)} does not match mask {self.spec.mask.shape}"
            )

    def forward(self, cube: np.ndarray) -> np.ndarray:
        cube = np.asarray(cube)
        if cube.ndim != 3 or cube.shape[2] != self.bands:
            raise ValueError(f"expected (H, W, {self.bands}) cube, got {cube.shape}")
        h, w = cube.shape[:2]
        self._check_scene(h, w)
        out = np.zeros((h, w + self.spec.max_shear), dtype=np.float64)
        mask = self.spec.mask
        for c, d in enumerate(self.spec.shears):
            out[:, d : d + w] += mask * cube[:, :, c]
        return out[:, :, None].astype(cube.dtype if np.issubdtype(cube.dtype, np.floating)
                                       else np.float32, copy=False)

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim == 3:
            image = image[:, :, 0]
        h = image.shape[0]
        w = self.spec.mask.shape[1]
        if image.shape != (h, self.spec.measurement_width) or h != self.spec.mask.shape[0]:
            raise ValueError("measurement shape does not match the camera geometry")
        out = np.empty((h, w, self.bands), dtype=image.dtype)
        for c, d in enumerate(self.spec.shears):
            out[:, :, c] = self.spec.mask * image[:, d : d + w]
        return out

    def conditioning_field(self, measurement: np.ndarray) -> np.ndarray:
        return deshear(measurement, self.spec)

    def render_patch(self, content: np.ndarray, origin: tuple, field_shape: tuple) -> tuple:
        content = np.asarray(content)
        h, w = content.shape[:2]
        r, c = origin
        self._check_scene(*field_shape)
        d0 = self.spec.shears[0]
        span = self.spec.max_shear - d0 + w
        window = np.zeros((h, span, 1), dtype=np.float64)
        mask = self.spec.mask[r : r + h, c : c + w]
        for band, d in enumerate(self.spec.shears):
            off = d - d0
            window[:, off : off + w, 0] += mask * content[:, :, band]
        real_t = content.dtype if np.issubdtype(content.dtype, np.floating) else np.float32
        return window.astype(real_t, copy=False), (r, c + d0)


def render_cassi(scene: HsiCube | np.ndarray, spec: CassiSpec) -> Measurement:
    """Render a cube through the coded-aperture shear camera."""
    data = scene.data if isinstance(scene, HsiCube) else np.asarray(scene)
    out = CassiOperator(spec).forward(data)
    return Measurement(data=np.maximum(out, 0.0))


def deshear(measurement: Measurement | np.ndarray, spec: CassiSpec) -> np.ndarray:
    """Undo the per-band shear: stack the W-wide crop at each band's offset.

    The result is a cube-shaped (H, W, C) stack co-aligned with the scene,
    used as the conditioning field for reconstruction.
    """
    data = measurement.data if isinstance(measurement, Measurement) else np.asarray(measurement)
    if data.ndim == 3:
        data = data[:, :, 0]
    h = data.shape[0]
    w = spec.mask.shape[1]
    if data.shape[1] != spec.measurement_width:
        raise ValueError(
            f"measurement width {data.shape[1]} does not match geometry "
            f"{spec.measurement_width}"
        )
    out = np.empty((h, w, spec.bands), dtype=data.dtype)
    for c, d in enumerate(spec.shears):
        out[:, :, c] = data[:, d : d + w]
    return out


# ---------------------------------------------------------------------------
# sensor noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian sensor noise at a target signal-to-noise ratio."""

    snr: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.snr <= 0:
            raise ValueError("SNR must be positive")


def noise_sigma(measurement: Measurement | np.ndarray, snr: float) -> float:
    """Noise scale: sigma = mean(y) / SNR."""
    data = measurement.data if isinstance(measurement, Measurement) else np.asarray(measurement)
    return float(data.mean(dtype=np.float64)) / float(snr)


def add_noise(measurement: Measurement, spec: NoiseSpec) -> Measurement:
    """y_noisy = max(y + N(0, sigma^2), 0) with sigma = mean(y)/SNR."""
    sigma = noise_sigma(measurement, spec.snr)
    rng = np.random.default_rng(spec.seed)
    noisy = measurement.data + rng.normal(0.0, sigma, size=measurement.data.shape)
    return Measurement(data=np.maximum(noisy, 0.0).astype(measurement.data.dtype, copy=False))
