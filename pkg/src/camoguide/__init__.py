"""Camouflaged-object segmentation with reference-distilled prototype guidance."""

from .memory import (MixturePredictor, PrototypeMemory, classification_loss,
                     combine_bootstrap, predict_logits, synthesize_guidance)
from .model import CamoModel, ModelConfig
from .tensor import Tensor, finite_difference_check, verification_mode
from .training import TrainConfig, train_loop

__all__ = [
    "CamoModel", "MixturePredictor", "ModelConfig", "PrototypeMemory",
    "Tensor", "TrainConfig", "classification_loss", "combine_bootstrap",
    "finite_difference_check", "predict_logits", "synthesize_guidance",
    "train_loop", "verification_mode",
]
