"""Proximal training for the l2 path norm of ReLU networks, with weight-decay baselines."""
from .errors import ConfigError, ContractError, DegenerateInputError, DimensionError, DivergenceError, FormatError
from .models import NetworkSpec, WeightStore, build_mlp, build_toy_cnn, derive_grouping, forward, init_store
from .optimizers import OptimizerConfig, Schedule, layerwise_balance, prox_group_l2, project_unit_sphere, step
from .regularization import objectives, path_norm_regularizer, structural_sparsity, sum_squared_weights

__version__ = "0.1.0"
