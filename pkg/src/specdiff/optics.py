"""Phase-only metalens design and scalar propagation to a spectral PSF.

Conventions: aperture and sensor planes use image axes (axis 0 = v/rows,
axis 1 = u/columns), coordinates centered on the optical axis. Lengths are
in meters inside the math; file and constructor surfaces use nm and um
where noted.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt
from scipy import fft as sfft

from .core import SpectralGrid, _readonly

FloatArray = npt.NDArray[np.floating]

NM = 1e-9
UM = 1e-6

DEFAULT_CELL_PITCH_NM = 250.0
DEFAULT_RADIUS_RANGE_NM = (15.0, 110.0)
DEFAULT_PILLAR_HEIGHT_NM = 600.0
DEFAULT_FOCAL_DISTANCE_M = 0.01
DEFAULT_SENSOR_PITCH_UM = 5.0
DEFAULT_KERNEL_SIZE = 64


# ---------------------------------------------------------------------------
# nanocylinder response table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NanocylinderTable:
    """Complex transmission t*exp(i*phi) of a cylinder cell vs radius and wavelength."""

    radii_nm: FloatArray
    wavelengths_nm: FloatArray
    transmittance: FloatArray
    phase: FloatArray

    def __post_init__(self) -> None:
        r = np.asarray(self.radii_nm, dtype=np.float64)
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        t = np.asarray(self.transmittance, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if r.ndim != 1 or r.size < 2 or np.any(r <= 0) or not np.all(np.diff(r) > 0):
            raise ValueError("radii must be positive and strictly increasing")
        if wl.ndim != 1 or wl.size < 1 or np.any(wl <= 0):
            raise ValueError("wavelengths must be positive")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        if t.shape != (r.size, wl.size) or ph.shape != t.shape:
            raise ValueError(
                f"transmittance/phase must have shape ({r.size}, {wl.size}), "
                f"got {t.shape} and {ph.shape}"
            )
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("transmittance must lie in [0, 1]")
        for name, arr in (("radii_nm", r), ("wavelengths_nm", wl),
                          ("transmittance", t), ("phase", ph)):
            object.__setattr__(self, name, _readonly(arr))

    @property
    def response(self) -> np.ndarray:
        """Complex response on the (radius, wavelength) sample grid."""
        return self.transmittance * np.exp(1j * self.phase)

    def response_at(self, wavelength_nm: float) -> np.ndarray:
        """Complex response per radius sample at one wavelength.

        Interpolates the complex value linearly along the wavelength axis;
        wavelengths outside the tabulated range are refused rather than
        extrapolated.
        """
        wl = self.wavelengths_nm
        if wavelength_nm < wl[0] or wavelength_nm > wl[-1]:
            raise ValueError(
                f"wavelength {wavelength_nm} nm outside table range [{wl[0]}, {wl[-1]}]"
            )
        resp = self.response
        if wl.size == 1:
            return resp[:, 0]
        re = np.empty(self.radii_nm.size)
        im = np.empty(self.radii_nm.size)
        for out, part in ((re, resp.real), (im, resp.imag)):
            for i in range(self.radii_nm.size):
                out[i] = np.interp(wavelength_nm, wl, part[i])
        return re + 1j * im

    def sample(self, radius_map_nm: np.ndarray, wavelength_nm: float) -> np.ndarray:
        """Complex response for every cell radius in a map (linear interp in radius)."""
        line = self.response_at(wavelength_nm)
        flat = np.asarray(radius_map_nm, dtype=np.float64).ravel()
        if np.any(flat < self.radii_nm[0]) or np.any(flat > self.radii_nm[-1]):
            raise ValueError("radius map contains radii outside the table range")
        re = np.interp(flat, self.radii_nm, line.real)
        im = np.interp(flat, self.radii_nm, line.imag)
        return (re + 1j * im).reshape(np.shape(radius_map_nm))


def analytic_table(
    n_radii: int = 128,
    radius_range_nm: tuple = DEFAULT_RADIUS_RANGE_NM,
    wavelengths_nm: Sequence[float] | None = None,
    height_nm: float = DEFAULT_PILLAR_HEIGHT_NM,
) -> NanocylinderTable:
    """Smooth effective-index stand-in for a simulated cylinder library.

    The phase delay is 2*pi*n_eff(r)*h/lambda with n_eff rising smoothly
    from 1.2 to 2.3 across the radius range and unit transmittance. The
    2*pi span it reaches over visible wavelengths is what makes the
    phase-matching step well posed.
    """
    if wavelengths_nm is None:
        wavelengths_nm = np.arange(400.0, 701.0, 10.0)
    radii = np.linspace(radius_range_nm[0], radius_range_nm[1], n_radii)
    u = (radii - radii[0]) / (radii[-1] - radii[0])
    n_eff = 1.2 + 1.1 * (3.0 * u**2 - 2.0 * u**3)
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    phase = 2.0 * np.pi * height_nm * np.outer(n_eff, 1.0 / wl)
    return NanocylinderTable(
        radii_nm=radii,
        wavelengths_nm=wl,
        transmittance=np.ones_like(phase),
        phase=phase,
    )


# ---------------------------------------------------------------------------
# lens design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FocusSpec:
    """Design wavelength and focal point (distance plus lateral offset)."""

    wavelength_nm: float
    distance_m: float = DEFAULT_FOCAL_DISTANCE_M
    offset_u_m: float = 0.0
    offset_v_m: float = 0.0

    def __post_init__(self) -> None:
        if self.wavelength_nm <= 0:
            raise ValueError("design wavelength must be positive")
        if self.distance_m <= 0:
            raise ValueError("focal distance must be positive")


def target_phase(spec: FocusSpec, u_m: np.ndarray, v_m: np.ndarray) -> np.ndarray:
    """Hyperboloidal phase profile focusing at (offset_u, offset_v, distance).

    The constant term is chosen so the phase is zero at the aperture
    center, i.e. at the cell closest to the chord through the focus.
    """
    lam = spec.wavelength_nm * NM
    d = spec.distance_m
    du, dv = spec.offset_u_m, spec.offset_v_m
    c = np.sqrt(d * d + du * du + dv * dv)
    path = np.sqrt(d * d + (u_m - du) ** 2 + (v_m - dv) ** 2)
    return (2.0 * np.pi / lam) * (c - path)


@dataclass(frozen=True)
class MetalensDesign:
    """Per-cell radius map (nm) on a square grid of the given pitch."""

    pitch_nm: float
    radius_map_nm: FloatArray

    def __post_init__(self) -> None:
        if self.pitch_nm <= 0:
            raise ValueError("cell pitch must be positive")
        arr = np.asarray(self.radius_map_nm, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"radius map must be square, got shape {arr.shape}")
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ValueError("radii must be positive and finite")
        object.__setattr__(self, "radius_map_nm", _readonly(arr))

    @property
    def n_cells(self) -> int:
        return int(self.radius_map_nm.shape[0])


def cell_coordinates(n_cells: int, pitch_nm: float) -> np.ndarray:
    """Centered 1-D cell-center coordinates in meters."""
    idx = np.arange(n_cells, dtype=np.float64)
    return (idx - (n_cells - 1) / 2.0) * pitch_nm * NM


def optimize_radii(
    spec: FocusSpec,
    table: NanocylinderTable,
    n_cells: int,
    pitch_nm: float = DEFAULT_CELL_PITCH_NM,
) -> MetalensDesign:
    """Pick, per cell, the tabulated radius whose response best matches the target.

    Brute force over the table's radius samples, minimizing
    |response - exp(i*psi)|^2 at the design wavelength. Ties resolve to the
    smallest radius (argmin returns the first, and radii are increasing).
    """
    if n_cells < 1:
        raise ValueError("aperture must contain at least one cell")
    coords = cell_coordinates(n_cells, pitch_nm)
    uu = coords[None, :]
    vv = coords[:, None]
    line = table.response_at(spec.wavelength_nm)  # (R,)
    t2 = np.abs(line) ** 2
    radius_map = np.empty((n_cells, n_cells), dtype=np.float64)
    # |t e^{i phi} - e^{i psi}|^2 = t^2 + 1 - 2 t cos(phi - psi); chunk rows
    # so the (R, rows, N) cost block stays small.
    block = max(1, int(2e7 // (line.size * n_cells)))
    for r0 in range(0, n_cells, block):
        r1 = min(r0 + block, n_cells)
        psi = target_phase(spec, uu, vv[r0:r1])
        target = np.exp(1j * psi)
        cost = (t2[:, None, None]
                + 1.0
                - 2.0 * (line[:, None, None] * np.conj(target[None])).real)
        best = np.argmin(cost, axis=0)
        radius_map[r0:r1] = table.radii_nm[best]
    return MetalensDesign(pitch_nm=pitch_nm, radius_map_nm=radius_map)


# ---------------------------------------------------------------------------
# aperture multiplexing
# ---------------------------------------------------------------------------

MASK_KINDS = ("angular-sector", "random-interleave")


@dataclass(frozen=True)
class SelectionMask:
    """Binary cell-selection mask over the aperture."""

    kind: str
    values: npt.NDArray[np.bool_]

    def __post_init__(self) -> None:
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}, expected one of {MASK_KINDS}")
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("mask must be a square 2-D array")
        object.__setattr__(self, "values", _readonly(arr.astype(bool)))


def make_masks(kind: str, count: int, n_cells: int, seed: int = 0) -> tuple:
    """Partition the aperture cells into `count` disjoint, complete masks.

    angular-sector: equal pie slices around the aperture center, half-open
    in angle so boundary cells land in exactly one sector.
    random-interleave: each cell assigned uniformly at random (seeded).
    """
    if count < 1:
        raise ValueError("mask count must be at least 1")
    if n_cells < 1:
        raise ValueError("aperture must contain at least one cell")
    if kind == "angular-sector":
        coords = cell_coordinates(n_cells, 1.0)
        theta = np.arctan2(coords[:, None], coords[None, :])  # (v, u)
        labels = np.floor((theta % (2.0 * np.pi)) / (2.0 * np.pi / count)).astype(int)
        labels = np.minimum(labels, count - 1)
    elif kind == "random-interleave":
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, count, size=(n_cells, n_cells))
    else:
        raise ValueError(f"unknown mask kind {kind!r}, expected one of {MASK_KINDS}")
    return tuple(SelectionMask(kind=kind, values=labels == j) for j in range(count))


def multiplex(lenses: Sequence[MetalensDesign], masks: Sequence[SelectionMask]) -> MetalensDesign:
    """Interleave several single-focus designs through disjoint cell masks."""
    if len(lenses) == 0 or len(lenses) != len(masks):
        raise ValueError("need one mask per lens")
    n = lenses[0].n_cells
    pitch = lenses[0].pitch_nm
    for lens in lenses:
        if lens.n_cells != n or lens.pitch_nm != pitch:
            raise ValueError("all lenses must share cell count and pitch")
    total = np.zeros((n, n), dtype=np.int64)
    for mask in masks:
        if mask.values.shape != (n, n):
            raise ValueError("mask shape does not match the lens aperture")
        total += mask.values
    if not np.all(total == 1):
        raise ValueError("masks must be pairwise disjoint and cover every cell")
    combined = np.zeros((n, n), dtype=np.float64)
    for lens, mask in zip(lenses, masks):
        combined[mask.values] = lens.radius_map_nm[mask.values]
    return MetalensDesign(pitch_nm=pitch, radius_map_nm=combined)


# ---------------------------------------------------------------------------
# Fresnel propagation and PSF assembly
# ---------------------------------------------------------------------------

def fresnel_propagate(
    field: np.ndarray,
    pitch_m: float,
    wavelength_m: float,
    distance_m: float,
    n_fft: int,
) -> tuple:
    """Propagate a sampled aperture field to the plane at `distance_m`.

    Single-FFT quadratic-phase transform: multiply by exp(ik r^2 / 2d),
    zero-pad to n_fft, FFT, then apply the output quadratic phase and the
    1/(i lambda d) amplitude. Returns (complex field, output pitch in m);
    the output grid is centered with DC at index n_fft//2.

    Energy is conserved exactly (Parseval): sum |out|^2 * out_pitch^2 equals
    sum |field|^2 * pitch^2.
    """
    field = np.asarray(field)
    if field.ndim != 2 or field.shape[0] != field.shape[1]:
        raise ValueError("aperture field must be square")
    n_ap = field.shape[0]
    if n_fft < n_ap:
        raise ValueError(f"n_fft={n_fft} smaller than the aperture ({n_ap} cells)")
    # Sampling criterion for the input chirp: pitch <= lambda*d / aperture width.
    width = n_ap * pitch_m
    if pitch_m > wavelength_m * distance_m / width:
        raise ValueError(
            "aperture pitch violates the quadratic-phase sampling criterion "
            f"(pitch {pitch_m:.3e} m > lambda*d/width {wavelength_m * distance_m / width:.3e} m)"
        )
    k = 2.0 * np.pi / wavelength_m
    x = cell_coordinates(n_ap, pitch_m / NM)
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    chirped = field * np.exp(1j * (k / (2.0 * distance_m)) * r2)
    embedded = np.zeros((n_fft, n_fft), dtype=np.complex128)
    lo = n_fft // 2 - n_ap // 2
    embedded[lo : lo + n_ap, lo : lo + n_ap] = chirped
    spectrum = sfft.fftshift(sfft.fft2(sfft.ifftshift(embedded)))
    out_pitch = wavelength_m * distance_m / (n_fft * pitch_m)
    u = (np.arange(n_fft) - n_fft // 2) * out_pitch
    # Even apertures have their geometric center half a cell off the FFT
    # lattice; the residual is an exact linear phase across the output plane.
    shift = 0.5 if n_ap % 2 == 0 else 0.0
    ramp_u = np.exp(-1j * (k / distance_m) * shift * pitch_m * u)
    out_r2 = u[:, None] ** 2 + u[None, :] ** 2
    amplitude = np.exp(1j * k * distance_m) / (1j * wavelength_m * distance_m)
    out = (amplitude * np.exp(1j * (k / (2.0 * distance_m)) * out_r2)
           * (ramp_u[:, None] * ramp_u[None, :]) * spectrum * pitch_m**2)
    return out, out_pitch


@dataclass(frozen=True)
class SpectralPsf:
    """Per-band point-spread kernels (K, K, C) sampled at the sensor pitch."""

    grid: SpectralGrid
    kernels: FloatArray
    pixel_pitch_um: float = DEFAULT_SENSOR_PITCH_UM

    def __post_init__(self) -> None:
        arr = np.asarray(self.kernels)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"kernels must be (K, K, C) with square K, got {arr.shape}")
        if arr.shape[2] != self.grid.count:
            raise ValueError("kernel band count does not match the spectral grid")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("kernels must be finite and non-negative")
        if self.pixel_pitch_um <= 0:
            raise ValueError("pixel pitch must be positive")
        object.__setattr__(self, "kernels", _readonly(arr))

    @property
    def kernel_size(self) -> int:
        return int(self.kernels.shape[0])


def ideal_psf(grid: SpectralGrid, kernel_size: int = DEFAULT_KERNEL_SIZE,
              pixel_pitch_um: float = DEFAULT_SENSOR_PITCH_UM) -> SpectralPsf:
    """All-in-focus reference: a unit impulse at (K//2, K//2) in every band."""
    kernels = np.zeros((kernel_size, kernel_size, grid.count), dtype=np.float32)
    kernels[kernel_size // 2, kernel_size // 2, :] = 1.0
    return SpectralPsf(grid=grid, kernels=kernels, pixel_pitch_um=pixel_pitch_um)


def _fft_size_for(wavelength_m: float, pitch_m: float, distance_m: float,
                  sensor_pitch_m: float, n_cells: int, kernel_size: int) -> tuple:
    """Pick (n_fft, supersample m) so the output pitch is sensor_pitch / m."""
    base = wavelength_m * distance_m / (pitch_m * sensor_pitch_m)
    m = 1
    while round(m * base) < max(n_cells, 2):
        m += 1
    n_fft = int(round(m * base))
    if n_fft < kernel_size * m + m:
        raise ValueError(
            "propagated field too small for the requested kernel crop; "
            "reduce kernel size or the aperture pitch"
        )
    return n_fft, m


def fresnel_psf(
    design: MetalensDesign,
    table: NanocylinderTable,
    grid: SpectralGrid,
    distance_m: float = DEFAULT_FOCAL_DISTANCE_M,
    sensor_pitch_um: float = DEFAULT_SENSOR_PITCH_UM,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    normalize: bool = True,
) -> SpectralPsf:
    """Render the design's spectral PSF on the sensor grid.

    For each band the aperture response is propagated with the single-FFT
    transform on a grid whose output pitch divides the sensor pitch by a
    whole supersampling ratio; intensity is then box-binned onto sensor
    pixels and a K x K window is cropped around the optical axis, which
    lands at pixel (K//2, K//2). By default the whole K*K*C cube is scaled
    to unit sum.
    """
    if kernel_size < 1:
        raise ValueError("kernel size must be positive")
    pitch_m = design.pitch_nm * NM
    sensor_m = sensor_pitch_um * UM
    n = design.n_cells
    half = kernel_size // 2
    cube = np.empty((kernel_size, kernel_size, grid.count), dtype=np.float64)
    for ci, wl_nm in enumerate(grid.wavelengths):
        lam = wl_nm * NM
        aperture = table.sample(design.radius_map_nm, wl_nm)
        n_fft, m = _fft_size_for(lam, pitch_m, distance_m, sensor_m, n, kernel_size)
        out, _ = fresnel_propagate(aperture, pitch_m, lam, distance_m, n_fft)
        intensity = (out.real**2 + out.imag**2)
        # bin m x m fine cells per sensor pixel, DC centered in pixel (half, half)
        start = n_fft // 2 - m // 2 - half * m
        stop = start + kernel_size * m
        if start < 0 or stop > n_fft:
            raise ValueError("kernel crop exceeds the propagated field")
        window = intensity[start:stop, start:stop]
        cube[:, :, ci] = window.reshape(kernel_size, m, kernel_size, m).sum(axis=(1, 3))
    if normalize:
        total = float(cube.sum(dtype=np.float64))
        if total <= 0:
            raise ValueError("propagated PSF has no energy inside the kernel window")
        cube /= total
    return SpectralPsf(grid=grid, kernels=cube.astype(np.float32),
                       pixel_pitch_um=sensor_pitch_um)


# ---------------------------------------------------------------------------
# named lens presets
# ---------------------------------------------------------------------------

LENS_PRESETS = ("AIF", "L1", "L2", "L4", "L4S", "L8S")


def preset_recipe(name: str) -> tuple:
    """(lens count, mask kind) behind a preset name.

    Count 0 means the all-in-focus ideal reference (no physical design).
    The trailing S selects angular sectors; otherwise interleaving is
    random per cell.
    """
    recipes = {
        "AIF": (0, None),
        "L1": (1, None),
        "L2": (2, "random-interleave"),
        "L4": (4, "random-interleave"),
        "L4S": (4, "angular-sector"),
        "L8S": (8, "angular-sector"),
    }
    if name not in recipes:
        raise ValueError(f"unknown lens preset {name!r}, expected one of {LENS_PRESETS}")
    return recipes[name]


def preset_wavelengths(grid: SpectralGrid, count: int) -> np.ndarray:
    """Design wavelengths for a multiplexed preset: evenly spread across the
    grid's range (the band center for a single lens)."""
    lo = float(grid.wavelengths[0])
    hi = float(grid.wavelengths[-1])
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def design_preset(
    name: str,
    table: NanocylinderTable,
    grid: SpectralGrid,
    n_cells: int,
    pitch_nm: float = DEFAULT_CELL_PITCH_NM,
    distance_m: float = DEFAULT_FOCAL_DISTANCE_M,
    seed: int = 0,
) -> MetalensDesign | None:
    """Build a preset lens; None for the all-in-focus reference."""
    count, mask_kind = preset_recipe(name)
    if count == 0:
        return None
    lenses = [
        optimize_radii(FocusSpec(wavelength_nm=wl, distance_m=distance_m),
                       table, n_cells, pitch_nm)
        for wl in preset_wavelengths(grid, count)
    ]
    if count == 1:
        return lenses[0]
    masks = make_masks(mask_kind, count, n_cells, seed=seed)
    return multiplex(lenses, masks)
