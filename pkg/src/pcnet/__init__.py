"""Train neural networks, measure the dimensionality of their activations, and
compress layers by rewriting them in the PCA basis of their inputs."""
from pcnet.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    NumericalError,
    PCNError,
    PlanError,
)
from pcnet.nn import Network, build_network, count_params
from pcnet.pca import ActivationPCA, PcaBasis, effective_dim, fit_pca, truncate
from pcnet.transform import TransformPlan, apply_plan, load_plan, planned_param_count

__version__ = "0.1.0"

__all__ = [
    "ActivationPCA", "CheckpointError", "ConfigError", "DataError", "DimensionError", "Network",
    "NumericalError", "PCNError", "PcaBasis", "PlanError", "TransformPlan", "apply_plan",
    "build_network", "count_params", "effective_dim", "fit_pca", "load_plan", "planned_param_count",
    "truncate", "__version__",
]
