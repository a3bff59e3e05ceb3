"""liderlab: Lipschitz-driven rehearsal regularisation on a desk-scale continual-learning lab."""

from .backbone import MLPBackbone, forward_with_trace, init_backbone
from .benchmark import (
    AccuracyMatrix,
    BufferConfig,
    TrainConfig,
    faa,
    ff,
    make_synthetic_stream,
    run_experiment,
)
from .errors import ConfigurationError, DimensionError, NumericError, TapeError
from .lider import LiderConfig, LipschitzTargets, lider_loss
from .rehearsal import MemoryBuffer, MethodConfig, reservoir_insert
from .spectral import model_lipschitz_product, power_iteration, transmitting_matrix

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "BufferConfig", "ConfigurationError", "DimensionError", "LiderConfig",
    "LipschitzTargets", "MLPBackbone", "MemoryBuffer", "MethodConfig", "NumericError",
    "TapeError", "TrainConfig", "faa", "ff", "forward_with_trace", "init_backbone",
    "lider_loss", "make_synthetic_stream", "model_lipschitz_product", "power_iteration",
    "reservoir_insert", "run_experiment", "transmitting_matrix",
]
