"""Vision transformer whose linear layers are shared depthwise convolutions,
with a simulated 4f optical correlator that executes them."""

from .errors import (CheckpointError, ConfigurationError, ConvShareError, DimensionError,
                     DivergenceError, InfeasibleError, StateError)
from .model import ConvShareViT, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "ConvShareError", "ConvShareViT", "DimensionError",
    "DivergenceError", "InfeasibleError", "ModelConfig", "StateError", "__version__",
]
