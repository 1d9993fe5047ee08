"""Semantic segmentation trained from a mix of pixel masks and patch labels."""

from .datagen import SynthConfig, split_schedule, synth_dataset
from .experiments import SweepConfig, SweepData, run_cls_head_sweep, run_sweep, write_report
from .metrics import aggregate_scores, class_prf1, confusion_matrix
from .model import Model, ModelConfig, build_model
from .preprocess import PrepConfig, build_pools, extract_tiles, foreground_mask
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Model", "ModelConfig", "PrepConfig", "SweepConfig", "SweepData", "SynthConfig", "Tensor", "TrainConfig",
    "aggregate_scores", "build_model", "build_pools", "class_prf1", "confusion_matrix", "extract_tiles",
    "foreground_mask", "no_grad", "run_cls_head_sweep", "run_sweep", "split_schedule", "synth_dataset", "train",
    "write_report",
]
