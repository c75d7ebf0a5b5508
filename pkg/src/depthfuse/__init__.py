"""Depth edge refinement toolkit."""
from .core import DepthMap, GradientField, Rect, Resolution, SoftMask, gradient, resample
from .fusion import FusionParams, derive_omega, poisson_fuse, refine
from .noise import NoiseSpec, fit_noise, simulate_predictor, synthesize

__version__ = "0.1.0"

__all__ = [
    "DepthMap", "GradientField", "Rect", "Resolution", "SoftMask", "gradient", "resample",
    "FusionParams", "derive_omega", "poisson_fuse", "refine",
    "NoiseSpec", "fit_noise", "simulate_predictor", "synthesize",
    "__version__",
]
