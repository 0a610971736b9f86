"""
Models Module for SigCAM Lab

This module contains the convolutional backbone and the dual-branch head
used for recognition (softmax branch) and explanation (sigmoid branch).

Models:
    - backbone.py: Conv/ReLU/pool backbone and GAP+FC head
    - dual_branch.py: Dual-branch model, forward passes, head replication, freezing
"""

from .backbone import Backbone, Head, HeadKind, kaiming_uniform
from .dual_branch import (
    Branch,
    DualBranchModel,
    FeatureStack,
    InferenceResult,
    ModelPart,
    forward_sigmoid,
    forward_softmax,
    freeze,
    infer,
    predict_batch,
    replicate_head,
    set_trainable,
)

# Version information
__version__ = "0.1.0"

# Module description
__description__ = "Backbone and dual-branch sigmoid head for SigCAM Lab"

# Export public API
__all__ = [
    # Main model classes
    'Backbone',
    'Head',
    'DualBranchModel',

    # Data classes
    'FeatureStack',
    'InferenceResult',

    # Enums
    'HeadKind',
    'ModelPart',
    'Branch',

    # Operations
    'forward_softmax',
    'forward_sigmoid',
    'infer',
    'predict_batch',
    'replicate_head',
    'freeze',
    'set_trainable',
    'kaiming_uniform',
]


def create_model(seed: int, num_classes: int) -> DualBranchModel:
    """Create a freshly initialized single-head model."""
    return DualBranchModel.create(seed=seed, num_classes=num_classes)


def get_model_info(model: DualBranchModel) -> dict:
    """Get parameter counts of the single-head and dual-branch model."""
    single = model.parameter_count(include_sigmoid=False)
    dual = model.parameter_count(include_sigmoid=True)
    return {
        'single_head_parameters': single,
        'dual_branch_parameters': dual,
        'overhead_percent': 100.0 * (dual - single) / single if single else 0.0,
        'feature_channels': model.backbone.out_channels,
        'num_classes': model.num_classes,
    }
