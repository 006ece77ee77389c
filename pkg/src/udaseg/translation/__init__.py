from .losses import (
    LossBreakdown,
    adversarial_loss_content,
    adversarial_loss_image,
    reconstruction_error,
    reconstruction_loss,
    total_loss,
)
from .model import TranslationConfig, TranslationModel
from .trainer import TrainingAborted, fidelity, train_translation, translate_volume

__all__ = [
    "LossBreakdown",
    "TrainingAborted",
    "TranslationConfig",
    "TranslationModel",
    "adversarial_loss_content",
    "adversarial_loss_image",
    "fidelity",
    "reconstruction_error",
    "reconstruction_loss",
    "total_loss",
    "train_translation",
    "translate_volume",
]
