from .inference import PredictionMap, predict, sliding_window
from .losses import seg_loss, soft_dice_per_class
from .model import SegConfig, SegmentationModel, seg_forward
from .schedule import poly_lr
from .trainer import PatchSampler, SegResult, SegTrainingAborted, TrainItem, fit, train_segmentation

__all__ = [
    "PatchSampler",
    "PredictionMap",
    "SegConfig",
    "SegResult",
    "SegTrainingAborted",
    "SegmentationModel",
    "TrainItem",
    "fit",
    "poly_lr",
    "predict",
    "seg_forward",
    "seg_loss",
    "sliding_window",
    "soft_dice_per_class",
    "train_segmentation",
]
