"""Estimator-style wrappers around the camera and the guided sampler.

These follow the scikit-learn conventions (constructor stores parameters
verbatim, `fit` learns state into trailing-underscore attributes,
`get_params`/`set_params` work for grid search) so the pipeline can slot
into existing model-selection tooling.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import make_layout
from .diffusion import GaussianPriorDenoiser, make_schedule
from .guidance import GuidanceConfig, reconstruct
from .render import ConvolutionOperator


def check_cube_array(x, bands: int | None = None) -> np.ndarray:
    """Validate an (H, W, C) cube array: 3-D, finite, non-negative."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) cube, got shape {arr.shape}")
    if bands is not None and arr.shape[2] != bands:
        raise ValueError(f"expected {bands} bands, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cube contains non-finite values")
    if np.any(arr < 0):
        raise ValueError("cube contains negative values")
    return arr


def check_measurement_array(y, channels: int | None = None) -> np.ndarray:
    """Validate an (H, W) or (H, W, S) measurement array; returns 3-D."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D measurement, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("measurement contains non-finite values")
    return arr


class PsfCameraTransformer(TransformerMixin, BaseEstimator):
    """Renders hyperspectral cubes to sensor measurements.

    Parameters
    ----------
    psf : SpectralPsf
        Per-band point-spread kernels.
    response : SensorResponse
        Per-channel spectral sensitivities on the same grid.
    """

    def __init__(self, psf=None, response=None):
        self.psf = psf
        self.response = response

    def fit(self, X=None, y=None):
        if self.psf is None or self.response is None:
            raise ValueError("psf and response are required")
        self.operator_ = ConvolutionOperator(self.psf, self.response)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "operator_"):
            self.fit()
        cube = check_cube_array(X, bands=self.operator_.bands)
        return self.operator_.forward(cube)


class GuidedDiffusionReconstructor(BaseEstimator):
    """Recovers cubes from snapshot measurements via guided sampling.

    `fit` estimates a Gaussian patch prior (mean plus a low-rank
    covariance factor from the top principal components) from a stack of
    clean training patches; `predict` runs the guided sampler against the
    configured measurement operator.
    """

    def __init__(self, operator=None, patch_size=8, stride=None, n_factors=4,
                 noise_floor=0.05, ddim_steps=10, eta=0.0, loops=None,
                 step_size=1.0, n_samples=1, grad_mode="frozen",
                 noise_aware=False, noise_sigma=None, tv_weight=100.0,
                 denormalize=True, workers=1, seed=0):
        self.operator = operator
        self.patch_size = patch_size
        self.stride = stride
        self.n_factors = n_factors
        self.noise_floor = noise_floor
        self.ddim_steps = ddim_steps
        self.eta = eta
        self.loops = loops
        self.step_size = step_size
        self.n_samples = n_samples
        self.grad_mode = grad_mode
        self.noise_aware = noise_aware
        self.noise_sigma = noise_sigma
        self.tv_weight = tv_weight
        self.denormalize = denormalize
        self.workers = workers
        self.seed = seed

    def fit(self, X, y=None):
        """Learn prior moments from training patches X of shape (n, P, P, C)."""
        if self.operator is None:
            raise ValueError("a measurement operator is required")
        patches = np.asarray(X, dtype=np.float64)
        p = self.patch_size
        if patches.ndim != 4 or patches.shape[1:3] != (p, p):
            raise ValueError(f"expected training patches (n, {p}, {p}, C), "
                             f"got {patches.shape}")
        if patches.shape[0] < 2:
            raise ValueError("need at least two training patches")
        bands = patches.shape[3]
        flat = patches.reshape(patches.shape[0], -1)
        mean = flat.mean(axis=0)
        centered = flat - mean
        k = min(self.n_factors, min(centered.shape) - 1)
        factor = None
        if k >= 1:
            _, s, vt = np.linalg.svd(centered, full_matrices=False)
            factor = (vt[:k].T * (s[:k] / np.sqrt(flat.shape[0] - 1)))
        self.schedule_ = make_schedule(ddim_steps=self.ddim_steps, eta=self.eta)
        self.denoiser_ = GaussianPriorDenoiser(
            mean, p, bands, self.schedule_,
            cov_factor=factor, noise_floor=self.noise_floor,
        )
        self.bands_ = bands
        return self

    def predict(self, y) -> np.ndarray:
        """Mean cube over the configured number of guided samples."""
        if not hasattr(self, "denoiser_"):
            raise RuntimeError("fit the reconstructor before predicting")
        y_arr = check_measurement_array(y)
        scene_shape = self.operator.conditioning_field(y_arr).shape[:2]
        layout = make_layout(scene_shape[0], scene_shape[1], self.patch_size,
                             self.stride)
        config = GuidanceConfig(
            loops=self.loops, step_size=self.step_size,
            n_samples=self.n_samples, grad_mode=self.grad_mode,
            noise_aware=self.noise_aware, noise_sigma=self.noise_sigma,
            tv_weight=self.tv_weight, denormalize=self.denormalize,
            workers=self.workers,
        )
        result = reconstruct(y_arr, self.denoiser_, self.operator, layout,
                             self.schedule_, config, seed=self.seed)
        return result.mean
