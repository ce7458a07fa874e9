"""Continuous-time modelling of multi-sample univariate time series with a
shift-modulated implicit neural representation and meta-learned codes."""

from .data import TimeSeriesSample, load_csv, normalize_dataset, synth_generate, z_normalize
from .meta import AdamState, InnerLoopConfig, OuterConfig, fit, inner_adapt
from .model import ModelConfig, TimeFlowModel, fourier_embed
from .persist import load_checkpoint, save_checkpoint
from .tasks import TaskWindow, TimeGrid, WindowSpec, infer_forecast, infer_impute

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "InnerLoopConfig",
    "ModelConfig",
    "OuterConfig",
    "TaskWindow",
    "TimeFlowModel",
    "TimeGrid",
    "TimeSeriesSample",
    "WindowSpec",
    "fit",
    "fourier_embed",
    "infer_forecast",
    "infer_impute",
    "inner_adapt",
    "load_checkpoint",
    "load_csv",
    "normalize_dataset",
    "save_checkpoint",
    "synth_generate",
    "z_normalize",
]
