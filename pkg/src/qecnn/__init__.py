"""Quality enhancement CNNs for decoded video with time-budgeted scheduling."""

from .errors import ConfigurationError, FormatError, QecnnError, UndefinedMetricError, ValidationError
from .models import Kind, ModelZoo, NetworkGraph, build_network, forward, load_weights, save_weights, train
from .nn import ConvLayer, TrainConfig
from .pipeline import Budget, BudgetReport, emit_report, run_budgeted
from .tqeo import CostModel, build_lut, get_model, solve_i_frame, solve_p_frame

__version__ = "0.1.0"

__all__ = [
    "Budget", "BudgetReport", "ConfigurationError", "ConvLayer", "CostModel", "FormatError", "Kind",
    "ModelZoo", "NetworkGraph", "QecnnError", "TrainConfig", "UndefinedMetricError", "ValidationError",
    "build_lut", "build_network", "emit_report", "forward", "get_model", "load_weights", "run_budgeted",
    "save_weights", "solve_i_frame", "solve_p_frame", "train",
]
