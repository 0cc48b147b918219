"""Spatio-temporal Hawkes processes with Gaussian-process priors on grids."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .gp import KernelSpec, LatentField, LinkSpec, prior_draw
from .grid import Grid
from .inference import FitConfig, FitMethod, PosteriorSummary, fit, posterior_l1_curve, rate_exponent
from .likelihood import LikelihoodWorkspace, WhitenedModel, log_likelihood
from .model import (
    Dataset,
    DomainError,
    EventSequence,
    GridField,
    ParameterF,
    TriggeringSupport,
    compensator,
    intensity,
    l1_distance,
    read_events_csv,
    stochastic_distance,
    write_events_csv,
)
from .simulate import Method, SimConfig, simulate, time_rescale

__all__ = [
    "Dataset",
    "DomainError",
    "EventSequence",
    "FitConfig",
    "FitMethod",
    "Grid",
    "GridField",
    "KernelSpec",
    "LatentField",
    "LikelihoodWorkspace",
    "LinkSpec",
    "Method",
    "ParameterF",
    "PosteriorSummary",
    "SimConfig",
    "TriggeringSupport",
    "WhitenedModel",
    "compensator",
    "fit",
    "intensity",
    "l1_distance",
    "log_likelihood",
    "posterior_l1_curve",
    "prior_draw",
    "rate_exponent",
    "read_events_csv",
    "simulate",
    "stochastic_distance",
    "time_rescale",
    "write_events_csv",
    "__version__",
]
