"""Snapshot hyperspectral imaging through a single diffractive optic:
lens design, measurement simulation, and diffusion-guided reconstruction."""

from .core import (
    HsiCube,
    Measurement,
    PatchLayout,
    PatchSet,
    SpectralGrid,
    denormalize_patch,
    make_layout,
    normalize_pair,
    normalize_patch,
    patch,
    stitch,
)
from .diffusion import (
    Denoiser,
    DiffusionSchedule,
    GaussianPriorDenoiser,
    ToyDenoiser,
    ddim_step,
    gaussian_prior_eps,
    make_schedule,
    q_sample,
    time_embedding,
    train_step,
    x0_hat,
)
from .estimators import (
    GuidedDiffusionReconstructor,
    PsfCameraTransformer,
    check_cube_array,
    check_measurement_array,
)
from .guidance import (
    GramSystem,
    GuidanceConfig,
    NumericError,
    ReconstructionResult,
    build_gram,
    guidance_loss,
    guided_update,
    reconstruct,
    solve_scales,
    total_variation,
    uncertainty,
)
from .metrics import (
    MetricReport,
    config_hash,
    evaluate,
    format_report,
    masked_metrics,
    pearson,
    psnr,
    sam,
    ssim_mean,
    uncertainty_mask,
    write_report_csv,
)
from .optics import (
    FocusSpec,
    MetalensDesign,
    NanocylinderTable,
    SelectionMask,
    SpectralPsf,
    analytic_table,
    design_preset,
    fresnel_propagate,
    fresnel_psf,
    ideal_psf,
    make_masks,
    multiplex,
    optimize_radii,
    target_phase,
)
from .render import (
    CassiOperator,
    CassiSpec,
    ConvolutionOperator,
    NoiseSpec,
    SensorResponse,
    add_noise,
    default_cassi,
    deshear,
    noise_sigma,
    render,
    render_cassi,
)
from .saliency import saliency_map, save_saliency
from .visualize import rgb_project

__version__ = "0.1.0"

__all__ = [
    "HsiCube", "Measurement", "PatchLayout", "PatchSet", "SpectralGrid",
    "denormalize_patch", "make_layout", "normalize_pair", "normalize_patch",
    "patch", "stitch",
    "Denoiser", "DiffusionSchedule", "GaussianPriorDenoiser", "ToyDenoiser",
    "ddim_step", "gaussian_prior_eps", "make_schedule", "q_sample",
    "time_embedding", "train_step", "x0_hat",
    "GuidedDiffusionReconstructor", "PsfCameraTransformer",
    "check_cube_array", "check_measurement_array",
    "GramSystem", "GuidanceConfig", "NumericError", "ReconstructionResult",
    "build_gram", "guidance_loss", "guided_update", "reconstruct",
    "solve_scales", "total_variation", "uncertainty",
    "MetricReport", "config_hash", "evaluate", "format_report",
    "masked_metrics", "pearson", "psnr", "sam", "ssim_mean",
    "uncertainty_mask", "write_report_csv",
    "FocusSpec", "MetalensDesign", "NanocylinderTable", "SelectionMask",
    "SpectralPsf", "analytic_table", "design_preset", "fresnel_propagate",
    "fresnel_psf", "ideal_psf", "make_masks", "multiplex", "optimize_radii",
    "target_phase",
    "CassiOperator", "CassiSpec", "ConvolutionOperator", "NoiseSpec",
    "SensorResponse", "add_noise", "default_cassi", "deshear", "noise_sigma",
    "render", "render_cassi",
    "saliency_map", "save_saliency", "rgb_project",
]
