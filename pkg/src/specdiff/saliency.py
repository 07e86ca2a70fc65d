"""Perturbation saliency: which measurement pixels drive an output pixel.

A baseline patch prediction is generated by a deterministic DDIM rollout
(no guidance). Each conditioning pixel is then zeroed in turn, the rollout
is repeated from the identical starting noise, and the per-band absolute
output change at a reference pixel, divided by the size of the input
perturbation, becomes that pixel's saliency.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import denormalize_patch, normalize_patch
from .diffusion import Denoiser, DiffusionSchedule, ddim_step


def _rollout(denoiser: Denoiser, x_start: np.ndarray, y_cond: np.ndarray,
             schedule: DiffusionSchedule) -> np.ndarray:
    x = x_start
    for t, t_prev in schedule.step_pairs():
        eps = denoiser.predict_eps(x, t, y_cond)
        x = ddim_step(x, eps, t, t_prev, schedule)
    return denormalize_patch(x)


def saliency_map(
    denoiser: Denoiser,
    y_patches: np.ndarray,
    ref_pixel: tuple,
    schedule: DiffusionSchedule,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Average saliency of every measurement pixel for one output pixel.

    `y_patches` is one conditioning patch (P, P, S) or a stack of them
    (n, P, P, S); the map is averaged over the stack. Zero-valued
    measurement pixels contribute zero (there is nothing to perturb).
    Sampling must be deterministic: schedules with eta != 0 are refused.
    """
    if schedule.eta != 0.0:
        raise ValueError("saliency needs deterministic sampling (eta must be 0)")
    stack = np.asarray(y_patches, dtype=np.float64)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.ndim != 4:
        raise ValueError(f"expected (n, P, P, S) conditioning patches, got {stack.shape}")
    n, p = stack.shape[0], stack.shape[1]
    r_ref, c_ref = (int(v) for v in ref_pixel)
    if not (0 <= r_ref < p and 0 <= c_ref < p):
        raise ValueError("reference pixel lies outside the patch")
    bands = getattr(denoiser, "bands", None)
    maps = []
    for idx in range(n):
        y_raw = stack[idx]
        y_cond = normalize_patch(y_raw, zero_policy="pass")
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        shape = (p, p, bands) if bands else y_raw.shape
        x_start = rng.standard_normal(shape)
        base = _rollout(denoiser, x_start, y_cond, schedule)

        def pixel_score(flat: int, y_raw=y_raw, x_start=x_start, base=base) -> float:
            i, j = divmod(flat, p)
            dy = np.abs(y_raw[i, j]).sum()
            if dy == 0.0:
                return 0.0
            perturbed = y_raw.copy()
            perturbed[i, j] = 0.0
            y_pert = normalize_patch(perturbed, zero_policy="pass")
            out = _rollout(denoiser, x_start, y_pert, schedule)
            delta = np.abs(out[r_ref, c_ref] - base[r_ref, c_ref]).sum()
            return float(delta / dy)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scores = list(pool.map(pixel_score, range(p * p)))
        else:
            scores = [pixel_score(f) for f in range(p * p)]
        maps.append(np.array(scores, dtype=np.float64).reshape(p, p))
    return np.mean(np.stack(maps), axis=0)


def save_saliency(path, smap: np.ndarray, pixel_pitch_um: float = 1.0) -> None:
    """Persist a saliency map in the single-band PSF container format."""
    from .core import SpectralGrid
    from .fileio import write_psf
    from .optics import SpectralPsf

    arr = np.asarray(smap, dtype=np.float32)
    psf = SpectralPsf(grid=SpectralGrid(np.array([550.0])),
                      kernels=arr[:, :, None], pixel_pitch_um=pixel_pitch_um)
    write_psf(path, psf)
