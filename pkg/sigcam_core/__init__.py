"""
SigCAM Core Module

Dual-branch sigmoid CAM lab - autograd, data, training, explanation and
evaluation.

A frozen softmax classifier keeps doing recognition while a replicated
per-class sigmoid head, trained on its own, supplies the channel evidence
for class activation maps. The lab also constructs the softmax distortions
(additive logit shift, sign collapse) that motivate the second branch and
measures localization and fidelity for every combination.

Modules:
    autograd: Tensor, tape and reverse-mode ops
    synth_data: Deterministic synthetic shapes dataset
    training: Softmax pretraining and sigmoid fine-tuning
    cam_engine: CAM family on either branch, clamping and composition
    distortion: Softmax distortion experiments
    metrics: Fidelity and localization metrics
    checkpoint: Binary checkpoint persistence
    engine: Command orchestration and run manifests

Modules that depend on ``models`` (training, cam_engine, distortion,
checkpoint, engine) are imported on use.
"""

from typing import Optional

from .autograd import Tensor, backward, gradcheck, no_grad, set_debug
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetIOError,
    DomainError,
    FingerprintError,
    FrozenParameterError,
    NonFiniteError,
    ShapeError,
    SigCamError,
    exit_code_for,
)
from .evaluation_result import BBox, EvalRecord, ExperimentResult, FidelityRecord, WsolRecord
from .synth_data import DatasetSpec, SynthSample, generate, load_dataset, save_dataset
from .metrics import (
    average_drop,
    gt_known_loc,
    heatmap_to_boxes,
    increase_in_confidence,
    iou,
    max_box_acc_v2,
    pxap,
    top1_loc,
)

# Version information
__version__ = "0.1.0"
__license__ = "MIT"

# Package metadata
__title__ = "sigcam_core"
__description__ = "Dual-branch sigmoid CAM lab"

__all__ = [
    # Autograd
    'Tensor',
    'backward',
    'gradcheck',
    'no_grad',
    'set_debug',

    # Errors
    'SigCamError',
    'ShapeError',
    'ContractError',
    'ConfigError',
    'DatasetIOError',
    'CheckpointError',
    'FingerprintError',
    'NonFiniteError',
    'FrozenParameterError',
    'DomainError',
    'exit_code_for',

    # Results
    'BBox',
    'EvalRecord',
    'ExperimentResult',
    'WsolRecord',
    'FidelityRecord',

    # Data
    'DatasetSpec',
    'SynthSample',
    'generate',
    'load_dataset',
    'save_dataset',

    # Metrics
    'average_drop',
    'increase_in_confidence',
    'heatmap_to_boxes',
    'iou',
    'gt_known_loc',
    'top1_loc',
    'max_box_acc_v2',
    'pxap',
]

DEFAULT_CONFIG_PATH = "config/settings.yaml"


def create_engine(config_path: Optional[str] = None):
    """
    Convenience function to create a new lab engine.

    Args:
        config_path: Path to the settings file (optional)

    Returns:
        Configured Engine instance
    """
    from .engine import Engine

    if config_path is None:
        config_path = DEFAULT_CONFIG_PATH
    return Engine(config_path)
