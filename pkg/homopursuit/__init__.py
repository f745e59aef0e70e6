"""
homopursuit - low-rank matrix regression with homogeneity pursuit
"""
__version__ = "1.0.0"

from homopursuit.errors import (
    ArgumentError,
    ConfigError,
    DatasetError,
    DivergenceError,
    HomoPursuitError,
    NumericError,
    SingularityError,
)
from homopursuit.model import DatasetBundle, ParameterSet, coefficient_tensor, get_link, loss_at
from homopursuit.optim import (
    FitConfig,
    FitReport,
    HeteroFit,
    fit_heterogeneous,
    fit_heterogeneous_sparse,
    fit_homogeneous,
    fit_homogeneous_sparse,
)
from homopursuit.pipeline import FitJobConfig, estimate

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DatasetError",
    "DivergenceError",
    "HomoPursuitError",
    "NumericError",
    "SingularityError",
    "DatasetBundle",
    "ParameterSet",
    "coefficient_tensor",
    "get_link",
    "loss_at",
    "FitConfig",
    "FitReport",
    "HeteroFit",
    "fit_heterogeneous",
    "fit_heterogeneous_sparse",
    "fit_homogeneous",
    "fit_homogeneous_sparse",
    "FitJobConfig",
    "estimate",
]
