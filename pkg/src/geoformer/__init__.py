"""
Transformer forecasting for spatio-temporal sensor fields with a learnable
Matérn distance bias in the attention logits, plus the simulator, baselines
and scoring tools needed to evaluate it.
"""

from .autodiff import GradientError, ShapeError, Tensor
from .baselines import KrigingOracle, historical_average, kriging_predict
from .experiments import ExperimentConfig, evaluate_criteria, run_experiment
from .kernels import KernelFamily, KernelSpec, SensorGrid, kernel_bias_matrix, matern_correlation
from .metrics import DMResult, ForecastResult, crps, diebold_mariano, mae, morans_i, pit_values, rmse
from .model import GeoTransformer, ModelConfig, Variant
from .simulate import SimConfig, StDataset, load_dataset, save_dataset, simulate, split
from .training import TrainConfig, TrainLog, adam_step, plateau_scheduler, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "GradientError", "ShapeError", "KernelFamily", "KernelSpec", "SensorGrid", "kernel_bias_matrix",
    "matern_correlation", "SimConfig", "StDataset", "simulate", "split", "save_dataset", "load_dataset",
    "ModelConfig", "Variant", "GeoTransformer", "TrainConfig", "TrainLog", "train", "adam_step",
    "plateau_scheduler", "KrigingOracle", "kriging_predict", "historical_average", "ForecastResult", "DMResult",
    "rmse", "mae", "crps", "diebold_mariano", "pit_values", "morans_i", "ExperimentConfig", "run_experiment",
    "evaluate_criteria",
]
