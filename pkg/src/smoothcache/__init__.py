"""Training-free, calibration-driven caching of branch outputs for diffusion transformers."""

from .calibration import CalibrationConfig, ErrorCurve, calibrate, load_curves, save_curves
from .diffusion import SamplerConfig, ddim_sample
from .experiment import ExperimentConfig, sweep
from .metrics import mac_model
from .model import LayerKey, LayerKind, Model, ModelConfig, build_model
from .runtime import compare_runs, run_cached
from .scheduler import COMPUTE, Schedule, predict_macs, synthesize_greedy, synthesize_uniform, validate

__version__ = "0.1.0"

__all__ = [
    "COMPUTE",
    "CalibrationConfig",
    "ErrorCurve",
    "ExperimentConfig",
    "LayerKey",
    "LayerKind",
    "Model",
    "ModelConfig",
    "SamplerConfig",
    "Schedule",
    "build_model",
    "calibrate",
    "compare_runs",
    "ddim_sample",
    "load_curves",
    "mac_model",
    "predict_macs",
    "run_cached",
    "save_curves",
    "sweep",
    "synthesize_greedy",
    "synthesize_uniform",
    "validate",
]
