"""Spectrally regularized mixture of experts with one-shot surgical adaptation."""

from .moe import ModelConfig, RoutingMode, SrMoeModel, model_forward, total_loss

__all__ = ["ModelConfig", "RoutingMode", "SrMoeModel", "model_forward", "total_loss"]
__version__ = "0.1.0"
