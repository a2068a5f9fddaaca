"""Partial-volume MR fingerprinting reconstruction by greedy approximate projection."""

from .fingerprint import (AcquisitionParams, Dictionary, TissueParams, build_dictionary,
                          parameter_grid, random_flip_angle_schedule, simulate_fingerprints)
from .metrics import EvalReport, dominant_tissue_maps, evaluate, success_rate, tissue_snr
from .operators import SamplingScheme, adjoint, add_noise, forward, gradient, make_epi_scheme
from .phantom import GroundTruth, default_tissues, make_pv_phantom, render_magnetization
from .projection import GapConfig, greedy_approximate_projection
from .solvers import auto_tune, blip, gap_mrf, tissue_consolidate

__all__ = [
    "AcquisitionParams", "Dictionary", "TissueParams", "build_dictionary", "parameter_grid",
    "random_flip_angle_schedule", "simulate_fingerprints", "EvalReport", "dominant_tissue_maps",
    "evaluate", "success_rate", "tissue_snr", "SamplingScheme", "adjoint", "add_noise", "forward",
    "gradient", "make_epi_scheme", "GroundTruth", "default_tissues", "make_pv_phantom",
    "render_magnetization", "GapConfig", "greedy_approximate_projection", "auto_tune", "blip",
    "gap_mrf", "tissue_consolidate",
]
