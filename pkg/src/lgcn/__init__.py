"""Desk-scale visual place recognition with dual-stream feature fusion."""

from .config import AblationFlags, ModelConfig, RunConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["AblationFlags", "ModelConfig", "RunConfig", "TrainConfig", "__version__"]
