"""Gaussian-process learning of interaction kernels in particle systems."""

__version__ = "0.1.0"

from .covfunc import MaternParams, gram, matern, matern_grad
from .errors import IllConditionedError, IntegrationError, NonFiniteError, NonSPDError, NumericalError
from .gp import (
    FittedGP,
    Hyperparameters,
    KernelEstimate,
    assemble_cross_cov,
    assemble_kff,
    nlml,
    nlml_grad,
    posterior_kernel,
)
from .systems import (
    SystemSpec,
    Trajectory,
    TrajectoryDataset,
    builtin_system,
    generate_dataset,
    preprocess_frames,
    rhs,
    simulate,
)
from .trainer import TrainConfig, TrainResult, minimize_nlml

__all__ = [
    "FittedGP",
    "Hyperparameters",
    "IllConditionedError",
    "IntegrationError",
    "KernelEstimate",
    "MaternParams",
    "NonFiniteError",
    "NonSPDError",
    "NumericalError",
    "SystemSpec",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "TrajectoryDataset",
    "assemble_cross_cov",
    "assemble_kff",
    "builtin_system",
    "generate_dataset",
    "gram",
    "matern",
    "matern_grad",
    "minimize_nlml",
    "nlml",
    "nlml_grad",
    "posterior_kernel",
    "preprocess_frames",
    "rhs",
    "simulate",
]
