"""Binary container formats and plain-text run manifests.

Every format starts with a 4-byte magic tag; all integers are unsigned
32-bit little-endian (shears are signed 32-bit) and all array payloads are
little-endian float32 in C order, so files round-trip bit-exactly across
platforms.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import HsiCube, Measurement, SpectralGrid
from .diffusion import ToyDenoiser
from .optics import NanocylinderTable, SpectralPsf
from .render import CassiSpec, SensorResponse

CUBE_MAGIC = b"HSI1"
MEASUREMENT_MAGIC = b"MSR1"
TABLE_MAGIC = b"NCT1"
PSF_MAGIC = b"PSF1"
SENSOR_MAGIC = b"SNS1"
CASSI_MAGIC = b"CAS1"
DENOISER_MAGIC = b"TDN1"

_U32 = np.dtype("<u4")
_I32 = np.dtype("<i4")
_F32 = np.dtype("<f4")


def _read_exact(stream: io.BufferedIOBase, count: int) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise ValueError("file is truncated")
    return data


def _check_magic(stream: io.BufferedIOBase, magic: bytes) -> None:
    found = _read_exact(stream, 4)
    if found != magic:
        raise ValueError(f"bad magic {found!r}, expected {magic!r}")


def _read_array(stream: io.BufferedIOBase, dtype: np.dtype, count: int) -> np.ndarray:
    return np.frombuffer(_read_exact(stream, count * dtype.itemsize), dtype=dtype).copy()


def _write_array(stream: io.BufferedIOBase, dtype: np.dtype, values) -> None:
    stream.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def write_cube(path, cube: HsiCube) -> None:
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        h, w, c = cube.data.shape
        _write_array(f, _U32, [h, w, c])
        _write_array(f, _F32, cube.grid.wavelengths)
        _write_array(f, _F32, cube.data)


def read_cube(path) -> HsiCube:
    with open(path, "rb") as f:
        _check_magic(f, CUBE_MAGIC)
        h, w, c = (int(v) for v in _read_array(f, _U32, 3))
        wavelengths = _read_array(f, _F32, c).astype(np.float64)
        data = _read_array(f, _F32, h * w * c).reshape(h, w, c)
        return HsiCube(grid=SpectralGrid(wavelengths), data=data)


def write_measurement(path, measurement: Measurement) -> None:
    with open(path, "wb") as f:
        f.write(MEASUREMENT_MAGIC)
        h, w, s = measurement.data.shape
        _write_array(f, _U32, [h, w, s])
        _write_array(f, _F32, measurement.data)


def read_measurement(path) -> Measurement:
    with open(path, "rb") as f:
        _check_magic(f, MEASUREMENT_MAGIC)
        h, w, s = (int(v) for v in _read_array(f, _U32, 3))
        return Measurement(data=_read_array(f, _F32, h * w * s).reshape(h, w, s))


def write_table(path, table: NanocylinderTable) -> None:
    # responses are stored as (t, phase) pairs row-major by radius
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        r, l = table.transmittance.shape
        _write_array(f, _U32, [r, l])
        _write_array(f, _F32, table.radii_nm)
        _write_array(f, _F32, table.wavelengths_nm)
        pairs = np.stack([table.transmittance, table.phase], axis=2)
        _write_array(f, _F32, pairs)


def read_table(path) -> NanocylinderTable:
    with open(path, "rb") as f:
        _check_magic(f, TABLE_MAGIC)
        r, l = (int(v) for v in _read_array(f, _U32, 2))
        radii = _read_array(f, _F32, r).astype(np.float64)
        wavelengths = _read_array(f, _F32, l).astype(np.float64)
        pairs = _read_array(f, _F32, r * l * 2).reshape(r, l, 2).astype(np.float64)
        return NanocylinderTable(
            radii_nm=radii,
            wavelengths_nm=wavelengths,
            transmittance=pairs[:, :, 0],
            phase=pairs[:, :, 1],
        )


def write_psf(path, psf: SpectralPsf) -> None:
    with open(path, "wb") as f:
        f.write(PSF_MAGIC)
        k, _, c = psf.kernels.shape
        _write_array(f, _U32, [k, c])
        _write_array(f, _F32, [psf.pixel_pitch_um])
        _write_array(f, _F32, psf.grid.wavelengths)
        _write_array(f, _F32, psf.kernels)


def read_psf(path) -> SpectralPsf:
    with open(path, "rb") as f:
        _check_magic(f, PSF_MAGIC)
        k, c = (int(v) for v in _read_array(f, _U32, 2))
        pitch = float(_read_array(f, _F32, 1)[0])
        wavelengths = _read_array(f, _F32, c).astype(np.float64)
        kernels = _read_array(f, _F32, k * k * c).reshape(k, k, c)
        return SpectralPsf(grid=SpectralGrid(wavelengths), kernels=kernels,
                           pixel_pitch_um=pitch)


def write_sensor(path, response: SensorResponse) -> None:
    with open(path, "wb") as f:
        f.write(SENSOR_MAGIC)
        s, c = response.weights.shape
        _write_array(f, _U32, [s, c])
        _write_array(f, _F32, response.grid.wavelengths)
        _write_array(f, _F32, response.weights)


def read_sensor(path) -> SensorResponse:
    with open(path, "rb") as f:
        _check_magic(f, SENSOR_MAGIC)
        s, c = (int(v) for v in _read_array(f, _U32, 2))
        wavelengths = _read_array(f, _F32, c).astype(np.float64)
        weights = _read_array(f, _F32, s * c).reshape(s, c).astype(np.float64)
        return SensorResponse(grid=SpectralGrid(wavelengths), weights=weights)


def write_cassi(path, spec: CassiSpec) -> None:
    with open(path, "wb") as f:
        f.write(CASSI_MAGIC)
        h, w = spec.mask.shape
        _write_array(f, _U32, [h, w, spec.bands])
        _write_array(f, _I32, spec.shears)
        _write_array(f, np.dtype("u1"), spec.mask)


def read_cassi(path) -> CassiSpec:
    with open(path, "rb") as f:
        _check_magic(f, CASSI_MAGIC)
        h, w, c = (int(v) for v in _read_array(f, _U32, 3))
        shears = _read_array(f, _I32, c).astype(np.int64)
        mask = _read_array(f, np.dtype("u1"), h * w).reshape(h, w)
        return CassiSpec(mask=mask, shears=shears)


_LOSS_FLAGS = {"l1": 0, "l2": 1}


def write_denoiser(path, denoiser: ToyDenoiser) -> None:
    with open(path, "wb") as f:
        f.write(DENOISER_MAGIC)
        _write_array(f, _U32, [
            denoiser.patch_size, denoiser.bands, denoiser.cond_channels,
            denoiser.emb_dim, denoiser.hidden, _LOSS_FLAGS[denoiser.loss],
        ])
        for param in denoiser.parameters:
            _write_array(f, _F32, param)


def read_denoiser(path) -> ToyDenoiser:
    with open(path, "rb") as f:
        _check_magic(f, DENOISER_MAGIC)
        patch_size, bands, cond, emb, hidden, flag = (
            int(v) for v in _read_array(f, _U32, 6)
        )
        if flag not in (0, 1):
            raise ValueError(f"unknown loss flag {flag}")
        model = ToyDenoiser(patch_size, bands, cond, hidden=hidden,
                            emb_dim=emb, loss="l1" if flag == 0 else "l2")
        model.w1 = _read_array(f, _F32, hidden * model.in_dim).reshape(
            hidden, model.in_dim).astype(np.float64)
        model.b1 = _read_array(f, _F32, hidden).astype(np.float64)
        model.w2 = _read_array(f, _F32, model.x_dim * hidden).reshape(
            model.x_dim, hidden).astype(np.float64)
        model.b2 = _read_array(f, _F32, model.x_dim).astype(np.float64)
        return model


def write_manifest(path, entries: Mapping) -> None:
    """key=value provenance file, one entry per line, keys kept in order."""
    lines = []
    for key, value in entries.items():
        key = str(key)
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValueError(f"manifest key/value may not contain '=' or newlines: {key!r}")
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed manifest line: {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries
