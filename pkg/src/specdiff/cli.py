"""Command-line surface: design-lens, render, reconstruct.

Every run writes its outputs plus a key=value manifest into --out, so any
result can be reproduced from the manifest and the recorded seed. Exit
codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .core import HsiCube, Measurement, SpectralGrid, make_layout
from .diffusion import GaussianPriorDenoiser, make_schedule
from .guidance import GuidanceConfig, NumericError, reconstruct, uncertainty
from .optics import (
    LENS_PRESETS,
    analytic_table,
    design_preset,
    fresnel_psf,
    ideal_psf,
)
from .render import (
    CassiOperator,
    ConvolutionOperator,
    NoiseSpec,
    SensorResponse,
    add_noise,
    noise_sigma,
)
from .visualize import heatmap, normalize_image, rgb_project, write_png

SENSOR_NAMES = ("pan", "rgb")


def _resolve_workers(flag_value: int) -> int:
    env = os.environ.get("SPECDIFF_THREADS")
    if env is not None:
        value = int(env)
    else:
        value = int(flag_value)
    if value < 1:
        raise ValueError("worker count must be at least 1")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sensor(spec: str, grid: SpectralGrid) -> SensorResponse:
    if spec == "pan":
        return SensorResponse.panchromatic(grid)
    if spec == "rgb":
        return SensorResponse.rgb(grid)
    if Path(spec).exists():
        return fileio.read_sensor(spec)
    raise ValueError(f"sensor must be a readable file or one of {SENSOR_NAMES}, got {spec!r}")


def _build_operator(args, grid_hint: SpectralGrid | None = None):
    """Measurement operator from --psf/--sensor or --cassi flags."""
    if getattr(args, "cassi", None):
        spec = fileio.read_cassi(args.cassi)
        return CassiOperator(spec, grid=grid_hint), "cassi", args.cassi
    if getattr(args, "psf", None):
        psf = fileio.read_psf(args.psf)
        sensor = _load_sensor(args.sensor, psf.grid)
        return ConvolutionOperator(psf, sensor), "psf", args.psf
    raise ValueError("one of --psf or --cassi is required")


# ---------------------------------------------------------------------------
# design-lens
# ---------------------------------------------------------------------------

def _cmd_design_lens(args) -> int:
    out = _out_dir(args)
    grid = SpectralGrid.default()
    if args.preset == "AIF":
        psf = ideal_psf(grid, kernel_size=args.kernel_size,
                        pixel_pitch_um=args.sensor_pitch_um)
        table_src = "none"
    else:
        table = fileio.read_table(args.table) if args.table else analytic_table()
        table_src = args.table or "analytic"
        design = design_preset(args.preset, table, grid, n_cells=args.cells,
                               pitch_nm=args.pitch_nm,
                               distance_m=args.focal_mm * 1e-3, seed=args.seed)
        psf = fresnel_psf(design, table, grid,
                          distance_m=args.focal_mm * 1e-3,
                          sensor_pitch_um=args.sensor_pitch_um,
                          kernel_size=args.kernel_size)
    fileio.write_psf(out / "psf.bin", psf)
    write_png(out / "psf_rgb.png",
              rgb_project(HsiCube(grid=grid, data=psf.kernels)))
    fileio.write_manifest(out / "design_manifest.txt", {
        "command": "design-lens",
        "preset": args.preset,
        "seed": args.seed,
        "cells": args.cells,
        "pitch_nm": args.pitch_nm,
        "kernel_size": args.kernel_size,
        "sensor_pitch_um": args.sensor_pitch_um,
        "focal_mm": args.focal_mm,
        "table": table_src,
        "grid_nm": f"{grid.wavelengths[0]:g}:{grid.wavelengths[-1]:g}:{grid.count}",
    })
    print(f"wrote {out / 'psf.bin'}")
    return 0


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _cmd_render(args) -> int:
    out = _out_dir(args)
    scene = fileio.read_cube(args.scene)
    operator, kind, op_path = _build_operator(args, grid_hint=scene.grid)
    if kind == "psf" and not operator.grid.matches(scene.grid):
        raise ValueError("scene and PSF spectral grids differ")
    data = operator.forward(scene.data)
    measurement = Measurement(data=np.maximum(data, 0.0))
    sigma = 0.0
    if args.snr is not None:
        sigma = noise_sigma(measurement, args.snr)
        measurement = add_noise(measurement, NoiseSpec(snr=args.snr, seed=args.seed))
    fileio.write_measurement(out / "measurement.bin", measurement)
    png = measurement.data[:, :, 0] if measurement.data.shape[2] == 1 else measurement.data
    write_png(out / "measurement.png", normalize_image(png))
    fileio.write_manifest(out / "render_manifest.txt", {
        "command": "render",
        "scene": args.scene,
        "operator": kind,
        "operator_file": op_path,
        "sensor": args.sensor if kind == "psf" else "none",
        "snr": args.snr if args.snr is not None else "none",
        "noise_sigma": sigma,
        "seed": args.seed,
    })
    print(f"wrote {out / 'measurement.bin'}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _load_denoiser(args, operator, schedule):
    if args.denoiser:
        model = fileio.read_denoiser(args.denoiser)
        if model.patch_size != args.patch:
            raise ValueError(
                f"checkpoint patch size {model.patch_size} does not match --patch {args.patch}"
            )
        if model.bands != operator.bands:
            raise ValueError(
                f"checkpoint has {model.bands} bands, operator expects {operator.bands}"
            )
        if model.cond_channels != operator.conditioning_channels:
            raise ValueError(
                f"checkpoint conditions on {model.cond_channels} channels, "
                f"operator provides {operator.conditioning_channels}"
            )
        return model, args.denoiser
    prior = GaussianPriorDenoiser(0.0, args.patch, operator.bands, schedule,
                                  noise_floor=1.0)
    return prior, "gaussian-prior"


def _cmd_reconstruct(args) -> int:
    out = _out_dir(args)
    measurement = fileio.read_measurement(args.measurement)
    operator, kind, op_path = _build_operator(args)
    workers = _resolve_workers(args.workers)
    schedule = make_schedule(ddim_steps=args.ddim_steps)
    denoiser, denoiser_src = _load_denoiser(args, operator, schedule)
    scene_shape = operator.conditioning_field(measurement.data).shape[:2]
    layout = make_layout(scene_shape[0], scene_shape[1], args.patch, args.stride)
    loops = 0 if args.no_guidance else args.guidance_loops
    noise_aware = args.snr is not None
    sigma = noise_sigma(measurement, args.snr) if noise_aware else None
    config = GuidanceConfig(
        loops=loops,
        step_size=args.eta,
        n_samples=args.samples,
        grad_mode=args.grad_mode,
        noise_aware=noise_aware,
        noise_sigma=sigma,
        tv_weight=args.tv_weight,
        workers=workers,
    )
    result = reconstruct(measurement, denoiser, operator, layout, schedule,
                         config, seed=args.seed)
    fileio.write_cube(out / "mean.hsi", result.mean_cube)
    for i in range(len(result.samples)):
        fileio.write_cube(out / f"sample_{i:02d}.hsi", result.sample_cube(i))
    try:
        write_png(out / "mean_rgb.png", rgb_project(result.mean_cube))
    except ValueError:
        write_png(out / "mean_rgb.png",
                  normalize_image(result.mean.sum(axis=2)))
    if args.samples >= 2:
        unc = uncertainty(result.samples)
        fileio.write_measurement(out / "uncertainty.msr",
                                 Measurement(data=unc.astype(np.float32)[:, :, None]))
        write_png(out / "uncertainty.png", heatmap(unc))
    else:
        print("warning: a single sample gives no uncertainty map", file=sys.stderr)
    fileio.write_manifest(out / "reconstruct_manifest.txt", {
        "command": "reconstruct",
        "measurement": args.measurement,
        "operator": kind,
        "operator_file": op_path,
        "sensor": args.sensor if kind == "psf" else "none",
        "denoiser": denoiser_src,
        "patch": args.patch,
        "stride": args.stride if args.stride is not None else args.patch,
        "schedule": f"linear:1e-4:0.02:1000:ddim{args.ddim_steps}",
        "eta": args.eta,
        "guidance_loops": config.resolved_loops(),
        "samples": args.samples,
        "seed": args.seed,
        "grad_mode": args.grad_mode,
        "snr": args.snr if args.snr is not None else "none",
        "noise_sigma": sigma if sigma is not None else "none",
        "tv_weight": args.tv_weight,
    })
    print(f"wrote {out / 'mean.hsi'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdiff",
        description="Snapshot hyperspectral imaging: lens design, rendering, "
                    "and diffusion-guided reconstruction.",
    )
    sub = parser.add_subparsers(dest="command")

    lens = sub.add_parser("design-lens", help="design a lens preset and write its PSF")
    lens.add_argument("--preset", required=True, choices=LENS_PRESETS)
    lens.add_argument("--table", default=None, help="nanocylinder response table file")
    lens.add_argument("--cells", type=int, default=200, help="aperture cells per side")
    lens.add_argument("--pitch-nm", type=float, default=250.0)
    lens.add_argument("--kernel-size", type=int, default=64)
    lens.add_argument("--sensor-pitch-um", type=float, default=5.0)
    lens.add_argument("--focal-mm", type=float, default=10.0)
    lens.add_argument("--seed", type=int, default=0)
    lens.add_argument("--out", required=True)
    lens.set_defaults(func=_cmd_design_lens)

    render_p = sub.add_parser("render", help="render a cube to a measurement")
    render_p.add_argument("--scene", required=True, help="HSI cube file")
    render_p.add_argument("--psf", default=None)
    render_p.add_argument("--cassi", default=None)
    render_p.add_argument("--sensor", default="pan",
                          help="sensor file or one of: " + ", ".join(SENSOR_NAMES))
    render_p.add_argument("--snr", type=float, default=None)
    render_p.add_argument("--seed", type=int, default=0)
    render_p.add_argument("--out", required=True)
    render_p.set_defaults(func=_cmd_render)

    rec = sub.add_parser("reconstruct", help="guided diffusion reconstruction")
    rec.add_argument("--measurement", required=True)
    rec.add_argument("--psf", default=None)
    rec.add_argument("--cassi", default=None)
    rec.add_argument("--sensor", default="pan",
                     help="sensor file or one of: " + ", ".join(SENSOR_NAMES))
    rec.add_argument("--denoiser", default=None, help="ToyDenoiser checkpoint file")
    rec.add_argument("--patch", type=int, default=64)
    rec.add_argument("--stride", type=int, default=None)
    rec.add_argument("--ddim-steps", type=int, default=50)
    rec.add_argument("--eta", type=float, default=1.0, help="guidance step size")
    rec.add_argument("--guidance-loops", type=int, default=None)
    rec.add_argument("--samples", type=int, default=10)
    rec.add_argument("--seed", type=int, default=0)
    rec.add_argument("--snr", type=float, default=None,
                     help="enable noise-aware guidance at this measurement SNR")
    rec.add_argument("--tv-weight", type=float, default=100.0)
    rec.add_argument("--grad-mode", choices=("frozen", "vjp"), default="frozen")
    rec.add_argument("--workers", type=int, default=1)
    rec.add_argument("--no-guidance", action="store_true")
    rec.add_argument("--out", required=True)
    rec.set_defaults(func=_cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
