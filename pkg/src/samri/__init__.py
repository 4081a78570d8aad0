"""Desk-scale prompt-driven MRI segmentation: frozen encoder, embedding bank,
trainable mask decoder, plus the preprocessing/evaluation machinery around it."""

from .data_io import (
    LabelVolume,
    PhantomSpec,
    Volume,
    extract_slices,
    generate_phantom,
    read_nifti,
    write_nifti,
)
from .estimator import SamriSegmenter
from .loss import LossConfig, dice_loss, focal_loss, samri_loss
from .metrics import SizeBin, dsc, hausdorff, msd, size_bin, wilcoxon_signed_rank
from .model import ModelConfig, SamriModel, predict_mask
from .preprocess import SliceSample, build_phantom_corpus, split_patients
from .prompts import BoxPrompt, PointPrompt, PromptSet, jitter_box, select_point, tightest_box
from .training import CheckpointSet, OptimizerConfig, SamplerConfig, plan_epoch, train

__version__ = "0.1.0"

__all__ = [
    "BoxPrompt",
    "CheckpointSet",
    "LabelVolume",
    "LossConfig",
    "ModelConfig",
    "OptimizerConfig",
    "PhantomSpec",
    "PointPrompt",
    "PromptSet",
    "SamplerConfig",
    "SamriModel",
    "SamriSegmenter",
    "SizeBin",
    "SliceSample",
    "Volume",
    "build_phantom_corpus",
    "dice_loss",
    "dsc",
    "extract_slices",
    "focal_loss",
    "generate_phantom",
    "hausdorff",
    "jitter_box",
    "msd",
    "plan_epoch",
    "predict_mask",
    "read_nifti",
    "samri_loss",
    "select_point",
    "size_bin",
    "split_patients",
    "tightest_box",
    "train",
    "wilcoxon_signed_rank",
    "write_nifti",
]
