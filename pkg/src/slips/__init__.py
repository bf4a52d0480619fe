"""Sampling by stochastic localization with MALA-estimated denoisers."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DomainError,
    InitializationError,
    InvalidInputError,
    SimulationError,
    SlipsError,
    UnsupportedTargetError,
)
from .metrics import MetricRecord, mode_weights, moment_error, sliced_tv
from .mcmc import MalaState, estimate_denoiser, estimate_eps0, mala_step, ula_step
from .sampler import BatchResult, RunResult, initialize, run_batch, run_rng, run_slips
from .sl_core import (
    Discretization,
    SlipsConfig,
    c_disc,
    log_snr_grid,
    posterior_log_density_unnorm,
    sigma_default,
    tv_information_bound,
    tv_total_bound,
    tweedie_score,
    uniform_grid,
)
from .targets import GaussianMixture, TargetModel, bimodal_benchmark, gaussian, symmetric_bimodal

__all__ = [
    "BatchResult", "ConfigError", "Discretization", "DomainError", "GaussianMixture",
    "InitializationError", "InvalidInputError", "MalaState", "MetricRecord", "RunResult",
    "SimulationError", "SlipsConfig", "SlipsError", "TargetModel", "UnsupportedTargetError",
    "bimodal_benchmark", "c_disc", "estimate_denoiser", "estimate_eps0", "gaussian",
    "initialize", "log_snr_grid", "mala_step", "mode_weights", "moment_error",
    "posterior_log_density_unnorm", "run_batch", "run_rng", "run_slips", "sigma_default",
    "sliced_tv", "symmetric_bimodal", "tv_information_bound", "tv_total_bound",
    "tweedie_score", "ula_step", "uniform_grid",
]
