"""Offline goal-conditioned RL on grid mazes.

Hierarchical agents learn from fixed datasets with expectile values whose
backups can span multi-step options; a config-driven runner evaluates them.
"""

from .approximator import MlpValue, NonFiniteError, TabularValue
from .dataset import DatasetError, OfflineDataset, generate_dataset, load_dataset, save_dataset
from .diagnostics import (DiagnosticsError, advantage_sign_error_rate, order_consistency_ratio,
                          temporal_distance, value_profile)
from .experiment import ConfigError, ExperimentConfig, evaluate_agent
from .kernels import BACKEND
from .maze import Action, Cell, GridMaze, load_layout
from .policy import AwrConfig, HierarchicalAgent, oracle_agent
from .value import ExpectileConfig, Objective, make_learner, optimal_value, value_step

__version__ = "0.1.0"

__all__ = [
    "Action", "AwrConfig", "BACKEND", "Cell", "ConfigError", "DatasetError", "DiagnosticsError",
    "ExpectileConfig", "ExperimentConfig", "GridMaze", "HierarchicalAgent", "MlpValue",
    "NonFiniteError", "Objective", "OfflineDataset", "TabularValue", "advantage_sign_error_rate",
    "evaluate_agent", "generate_dataset", "load_dataset", "load_layout", "make_learner",
    "optimal_value", "oracle_agent", "order_consistency_ratio", "save_dataset",
    "temporal_distance", "value_profile", "value_step",
]
