"""
NeuroVol - Implied-volatility surfaces from sparse option quotes
Attentive neural process with a SABR-prior curriculum, plus SABR, SSVI and GP baselines
"""

__version__ = "0.1.0"

from .config import ModelConfig, PipelineConfig, TrainConfig, load_config
from .core import Coordinate, DayRecord, Quote, Task, TaskSource, make_task
from .errors import NeuroVolError
from .volnp import PredictiveDistribution, VolatilityNeuralProcess

__all__ = [
    "__version__",
    "Coordinate",
    "DayRecord",
    "ModelConfig",
    "NeuroVolError",
    "PipelineConfig",
    "PredictiveDistribution",
    "Quote",
    "Task",
    "TaskSource",
    "TrainConfig",
    "VolatilityNeuralProcess",
    "load_config",
    "make_task",
]
