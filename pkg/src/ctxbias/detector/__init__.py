"""Toy detector, its adapter contract, matching and mAP@50."""

from .evaluate import EvaluationError, average_precision, map50, match_detections
from .model import (LAYERS, STRIDES, AblationHook, DetectorNet, HookError, TinyDetector,
                    downsample_mask, nms)
from .train import ConfigError, TrainConfig, TrainingError, evaluate_map, split_holdout, train

__all__ = [
    "LAYERS", "STRIDES", "AblationHook", "ConfigError", "DetectorNet", "EvaluationError",
    "HookError", "TinyDetector", "TrainConfig", "TrainingError", "average_precision",
    "downsample_mask", "evaluate_map", "map50", "match_detections", "nms", "split_holdout", "train",
]
