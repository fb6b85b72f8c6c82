"""Boundary-guided encoder-decoder segmentation of breast ultrasound lesions."""

from .config import PBNetConfig, load_config, tiny_preset
from .estimator import PBNetSegmenter
from .losses import LossBundle, boundary_loss, seg_loss, total_loss
from .network import PBNet, PBNetOutputs, count_macs, count_parameters, load_checkpoint, save_checkpoint

__all__ = [
    "PBNet",
    "PBNetConfig",
    "PBNetOutputs",
    "PBNetSegmenter",
    "LossBundle",
    "boundary_loss",
    "count_macs",
    "count_parameters",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "seg_loss",
    "tiny_preset",
    "total_loss",
]

__version__ = "0.1.0"
