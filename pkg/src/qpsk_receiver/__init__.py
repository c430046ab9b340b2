"""Photon-counting QPSK receiver with displacement and three detector arms."""

__version__ = "0.1.0"

from .bounds import BoundKind, bound_curve, helstrom_bound, heterodyne_limit
from .calibration import (
    FitError,
    FringeFit,
    FringeSample,
    fit_fringe,
    fringe_intensity,
    hwp_angle_for_ratio,
    normalized_fringe_intensity,
    state_prep_diagnostic,
    visibility_from_extrema,
)
from .model import (
    OUTCOMES,
    Alphabet,
    ArmConfig,
    Outcome,
    ReceiverConfig,
    exact_error_probability,
    joint_likelihood,
    map_decision,
    mean_click_intensity,
    p_outcome_given_state,
)
from .montecarlo import TrialReport, simulate
from .optimize import OptimizationResult, curve, optimize_displacements, optimize_splitting

__all__ = [
    "OUTCOMES",
    "Alphabet",
    "ArmConfig",
    "BoundKind",
    "FitError",
    "FringeFit",
    "FringeSample",
    "OptimizationResult",
    "Outcome",
    "ReceiverConfig",
    "TrialReport",
    "bound_curve",
    "curve",
    "exact_error_probability",
    "fit_fringe",
    "fringe_intensity",
    "helstrom_bound",
    "heterodyne_limit",
    "hwp_angle_for_ratio",
    "joint_likelihood",
    "map_decision",
    "mean_click_intensity",
    "normalized_fringe_intensity",
    "optimize_displacements",
    "optimize_splitting",
    "p_outcome_given_state",
    "simulate",
    "state_prep_diagnostic",
    "visibility_from_extrema",
]
