"""Multimodal air-quality estimation: a CNN image branch fused with sensor readings.

Built on a small reverse-mode autodiff engine over numpy (:mod:`aqfusion.tensor`).
"""

from .data import AqiClass, Sample, classify_aqi, generate_synthetic, load_manifest, stratified_split
from .errors import AQFusionError, ContractError, DataError, DivergenceError, ParameterError, ShapeError
from .evaluation import MetricsReport, evaluate, robustness_sweep
from .explain import grad_cam
from .model import ModelConfig, composite_loss, forward, init_params
from .rng import Rng
from .train import Checkpoint, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AqiClass", "Sample", "classify_aqi", "generate_synthetic", "load_manifest", "stratified_split",
    "AQFusionError", "ContractError", "DataError", "DivergenceError", "ParameterError", "ShapeError",
    "MetricsReport", "evaluate", "robustness_sweep", "grad_cam",
    "ModelConfig", "composite_loss", "forward", "init_params", "Rng",
    "Checkpoint", "TrainConfig", "fit",
]
