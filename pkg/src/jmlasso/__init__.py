"""Joint longitudinal/survival model with a lasso-penalised Cox part.

Estimation uses a stochastic proximal gradient preconditioned by a running
estimate of the Fisher information (SPG-FIM), with Metropolis-Hastings
sampling of the individual latent variables.
"""
from .exceptions import DimensionError, DomainError, NumericError, SaturationError
from .hazard import cumulative_hazard, gauss_legendre, joint_hazard, sample_survival_time
from .marginal import BicRecord, bic, log_marginal_mc
from .model import Dataset, LatentVector, Theta, complete_grad, complete_loglik, flatten, unflatten
from .optimizer import FitTrace, SpgOptions, StepSchedule, sg_fim, soft_threshold, spg_fim
from .pipeline import (PathConfig, SelectionPath, StudyConfig, StudyReport, fit_path,
                       replicate_study, select_and_refit)
from .simulator import SimConfig, simulate, table1_theta

__all__ = [
    "BicRecord", "Dataset", "DimensionError", "DomainError", "FitTrace", "LatentVector",
    "NumericError", "PathConfig", "SaturationError", "SelectionPath", "SimConfig", "SpgOptions",
    "StepSchedule", "StudyConfig", "StudyReport", "Theta", "bic", "complete_grad",
    "complete_loglik", "cumulative_hazard", "fit_path", "flatten", "gauss_legendre",
    "joint_hazard", "log_marginal_mc", "replicate_study", "sample_survival_time", "select_and_refit",
    "sg_fim", "simulate", "soft_threshold", "spg_fim", "table1_theta", "unflatten",
]
__version__ = "0.1.0"
