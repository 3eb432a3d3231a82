"""Boundary-aware query-based instance segmentation on a CPU-sized footprint.

The model couples a multi-scale deformable encoder with a morphological
boundary branch, salient-point query initialization and a decoder that
refines mask and boundary queries jointly.  Training uses Hungarian
matching with point-sampled BCE and Dice terms; evaluation reports
COCO-style mask AP.
"""
from .config import ConfigError, RunConfig, config_from_dict, desk_profile, load_config
from .data import Sample, synth_generate
from .losses import LossBreakdown, total_loss
from .matching import hungarian_match
from .metrics import APReport, evaluate_ap
from .model import FingerprintMismatch, InstanceSegmenter, load_checkpoint, save_checkpoint

__all__ = [
    "APReport", "ConfigError", "FingerprintMismatch", "InstanceSegmenter", "LossBreakdown",
    "RunConfig", "Sample", "config_from_dict", "desk_profile", "evaluate_ap", "hungarian_match",
    "load_checkpoint", "load_config", "save_checkpoint", "synth_generate", "total_loss",
]
__version__ = "0.1.0"
