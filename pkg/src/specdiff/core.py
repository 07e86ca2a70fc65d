"""Core containers: spectral grids, cubes, measurements and patch geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.floating]

DEFAULT_WAVELENGTHS_NM = tuple(float(w) for w in range(400, 701, 10))


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class SpectralGrid:
    """Band centers in nanometers, strictly increasing."""

    wavelengths: FloatArray

    def __post_init__(self) -> None:
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        if wl.ndim != 1 or wl.size < 1:
            raise ValueError("wavelengths must be a non-empty 1-D sequence")
        if np.any(wl <= 0):
            raise ValueError("wavelengths must be positive")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths", _readonly(wl))

    @property
    def count(self) -> int:
        return int(self.wavelengths.size)

    def matches(self, other: "SpectralGrid") -> bool:
        return bool(np.array_equal(self.wavelengths, other.wavelengths))

    @classmethod
    def default(cls) -> "SpectralGrid":
        """31 bands, 400-700 nm in 10 nm steps."""
        return cls(np.asarray(DEFAULT_WAVELENGTHS_NM))


@dataclass(frozen=True)
class HsiCube:
    """Radiance cube of shape (H, W, C) on a spectral grid.

    Values are non-negative and finite; the array is exposed read-only.
    """

    grid: SpectralGrid
    data: FloatArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"cube data must be 3-D (H, W, C), got shape {arr.shape}")
        if arr.shape[2] != self.grid.count:
            raise ValueError(
                f"band axis {arr.shape[2]} does not match grid with {self.grid.count} bands"
            )
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("cube data must be finite")
        if np.any(arr < 0):
            raise ValueError("cube data must be non-negative")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def bands(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class Measurement:
    """Sensor image of shape (H, W, S) with S = 1 (panchromatic) or 3 (RGB)."""

    data: FloatArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"measurement data must be (H, W, S), got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"measurement channel count must be 1 or 3, got {arr.shape[2]}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("measurement data must be finite")
        if np.any(arr < 0):
            raise ValueError("measurement data must be non-negative")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


def _pad_length(length: int, patch: int, stride: int) -> int:
    if length <= patch:
        return patch
    return patch + math.ceil((length - patch) / stride) * stride


def _keep_bounds(origins: Sequence[int], patch: int, stride: int, padded: int) -> tuple:
    # Boundaries halfway between neighbouring patch centres; edge patches
    # absorb the margins so the keep regions partition [0, padded).
    bounds = []
    for idx, origin in enumerate(origins):
        lo = 0 if idx == 0 else origins[idx - 1] + (patch + stride) // 2
        hi = padded if idx == len(origins) - 1 else origin + (patch + stride) // 2
        bounds.append((lo, hi))
    return tuple(bounds)


@dataclass(frozen=True)
class PatchLayout:
    """Tiling of an (H, W) field into P x P patches on a regular stride.

    Overlapping layouts (stride < P) assign every padded pixel to exactly
    one patch via central keep regions; edge patches keep their margins.
    """

    patch_size: int
    stride: int
    height: int
    width: int
    padded_height: int
    padded_width: int
    row_origins: tuple
    col_origins: tuple
    row_keep: tuple
    col_keep: tuple

    @property
    def n_rows(self) -> int:
        return len(self.row_origins)

    @property
    def n_cols(self) -> int:
        return len(self.col_origins)

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    def origin(self, index: int) -> tuple:
        """(row, col) of the top-left corner of patch `index` (row-major)."""
        r, c = divmod(index, self.n_cols)
        return self.row_origins[r], self.col_origins[c]

    def keep_box(self, index: int) -> tuple:
        """Half-open (r0, r1, c0, c1) in padded-field coordinates kept at stitch."""
        r, c = divmod(index, self.n_cols)
        r0, r1 = self.row_keep[r]
        c0, c1 = self.col_keep[c]
        return r0, r1, c0, c1


def make_layout(height: int, width: int, patch_size: int, stride: int | None = None) -> PatchLayout:
    """Build the patch tiling for a field of the given size.

    The field is zero-padded on the bottom/right so that the origins
    0, stride, 2*stride, ... cover it exactly; `stitch` crops the padding
    back off.
    """
    if stride is None:
        stride = patch_size
    if patch_size < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if stride > patch_size:
        raise ValueError(f"stride {stride} larger than patch size {patch_size} leaves gaps")
    if height < 1 or width < 1:
        raise ValueError("field dimensions must be positive")
    ph = _pad_length(height, patch_size, stride)
    pw = _pad_length(width, patch_size, stride)
    rows = tuple(range(0, ph - patch_size + 1, stride))
    cols = tuple(range(0, pw - patch_size + 1, stride))
    return PatchLayout(
        patch_size=patch_size,
        stride=stride,
        height=height,
        width=width,
        padded_height=ph,
        padded_width=pw,
        row_origins=rows,
        col_origins=cols,
        row_keep=_keep_bounds(rows, patch_size, stride, ph),
        col_keep=_keep_bounds(cols, patch_size, stride, pw),
    )


@dataclass(frozen=True)
class PatchSet:
    """Stack of patches (p, P, P, B) tied to a layout, with per-patch scales."""

    layout: PatchLayout
    patches: FloatArray
    scales: FloatArray

    def __post_init__(self) -> None:
        arr = np.asarray(self.patches)
        p = self.layout.patch_size
        if arr.ndim != 4 or arr.shape[0] != self.layout.n_patches or arr.shape[1:3] != (p, p):
            raise ValueError(
                f"patches must have shape ({self.layout.n_patches}, {p}, {p}, B), got {arr.shape}"
            )
        sc = np.asarray(self.scales, dtype=np.float64)
        if sc.shape != (arr.shape[0],):
            raise ValueError(f"scales must have shape ({arr.shape[0]},), got {sc.shape}")
        object.__setattr__(self, "patches", arr)
        object.__setattr__(self, "scales", sc)

    @property
    def bands(self) -> int:
        return int(self.patches.shape[3])

    def with_scales(self, scales: FloatArray) -> "PatchSet":
        return replace(self, scales=np.asarray(scales, dtype=np.float64))


ArrayLikeField = Union[HsiCube, Measurement, np.ndarray]


def _field_data(field: ArrayLikeField) -> np.ndarray:
    if isinstance(field, (HsiCube, Measurement)):
        return field.data
    arr = np.asarray(field)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D field, got shape {arr.shape}")
    return arr


def patch(field: ArrayLikeField, layout: PatchLayout) -> PatchSet:
    """Cut a field into the layout's patches (zero-padding bottom/right)."""
    data = _field_data(field)
    if data.shape[0] != layout.height or data.shape[1] != layout.width:
        raise ValueError(
            f"field shape {data.shape[:2]} does not match layout "
            f"({layout.height}, {layout.width})"
        )
    bands = data.shape[2]
    padded = np.zeros((layout.padded_height, layout.padded_width, bands), dtype=data.dtype)
    padded[: layout.height, : layout.width] = data
    p = layout.patch_size
    out = np.empty((layout.n_patches, p, p, bands), dtype=data.dtype)
    for i in range(layout.n_patches):
        r, c = layout.origin(i)
        out[i] = padded[r : r + p, c : c + p]
    return PatchSet(layout=layout, patches=out, scales=np.ones(layout.n_patches))


def stitch(patches: PatchSet) -> np.ndarray:
    """Reassemble a field from patches, applying per-patch scales.

    Each padded pixel is taken from exactly one patch (its keep region),
    then the zero-padding margin is cropped off.
    """
    layout = patches.layout
    bands = patches.bands
    out = np.zeros((layout.padded_height, layout.padded_width, bands), dtype=np.result_type(patches.patches.dtype, np.float32))
    for i in range(layout.n_patches):
        r, c = layout.origin(i)
        r0, r1, c0, c1 = layout.keep_box(i)
        block = patches.patches[i, r0 - r : r1 - r, c0 - c : c1 - c]
        out[r0:r1, c0:c1] = patches.scales[i] * block
    return out[: layout.height, : layout.width]


def normalize_patch(values: np.ndarray, zero_policy: str = "error") -> np.ndarray:
    """Max-normalize to [0, 1] then map affinely onto [-1, 1].

    The maximum element of the result is exactly +1. All-zero input either
    raises (training data should never be blank) or passes through as zeros
    (`zero_policy="pass"`), which is the inference-time convention.
    """
    arr = np.asarray(values)
    peak = float(np.max(arr)) if arr.size else 0.0
    if peak <= 0.0:
        if zero_policy == "pass":
            return np.zeros_like(arr)
        raise ValueError("cannot normalize an all-zero patch")
    return 2.0 * (arr / peak) - 1.0


def normalize_pair(x_patch: np.ndarray, y_patch: np.ndarray) -> tuple:
    """Independently max-normalize a cube patch and its measurement patch.

    Both outputs live in [-1, 1] with max exactly +1; the relative scale
    between them is intentionally discarded and recovered later from the
    measurement by least squares.
    """
    return normalize_patch(x_patch), normalize_patch(y_patch)


def denormalize_patch(values: np.ndarray) -> np.ndarray:
    """Inverse of the [0, 1] -> [-1, 1] affine map (scale stays unknown)."""
    return 0.5 * (np.asarray(values) + 1.0)
