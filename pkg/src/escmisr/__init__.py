"""Multi-image super-resolution with cross-frame message-token fusion."""
from .config import FusionConfig, ModelConfig, TrainConfig
from .model import EscMisr

__all__ = ["EscMisr", "FusionConfig", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
