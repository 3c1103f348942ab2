"""N:M semi-structured sparse spiking neural networks learned from scratch."""
from .config import RunConfig, load_config
from .errors import (
    DimensionError,
    DivergenceError,
    DomainError,
    InvariantViolation,
    NumericError,
    RefusalError,
    StateError,
)
from .masks import AnnealSchedule, BlockLogits, MaskConfig
from .pipeline import Trainer, run
from .snn import LIFParams, SpikingNetwork

__version__ = "0.1.0"
