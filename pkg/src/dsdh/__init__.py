"""Decoupled sequential detection heads and a desk-scale benchmark for them."""
__version__ = "0.1.0"

from .boxes import decode_full, decode_offset, decode_scaling, encode_delta, iou, nms
from .config import ExperimentConfig, load_config, save_config
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DSDHError,
    IntegrityError,
    InvalidInputError,
    NonFiniteLossError,
)
from .heads import BranchSpec, DetectionHead, HeadArchitecture, HeadConfig, LossWeights, compute_loss
from .metrics import evaluate_detections, pascal_ap
from .roi import FeatureMap, roi_align
from .scenes import SynthConfig, generate_dataset, generate_scene, read_dataset, write_dataset
from .training import RunRecord, evaluate, replay, train

__all__ = [
    "BranchSpec",
    "CheckpointMismatchError",
    "ConfigError",
    "DSDHError",
    "DetectionHead",
    "ExperimentConfig",
    "FeatureMap",
    "HeadArchitecture",
    "HeadConfig",
    "IntegrityError",
    "InvalidInputError",
    "LossWeights",
    "NonFiniteLossError",
    "RunRecord",
    "SynthConfig",
    "compute_loss",
    "decode_full",
    "decode_offset",
    "decode_scaling",
    "encode_delta",
    "evaluate",
    "evaluate_detections",
    "generate_dataset",
    "generate_scene",
    "iou",
    "load_config",
    "nms",
    "pascal_ap",
    "read_dataset",
    "replay",
    "roi_align",
    "save_config",
    "train",
    "write_dataset",
]
