"""
Tests Module for SigCAM Lab

This module contains unit tests and integration tests for the dual-branch
sigmoid CAM lab.

Test Files:
    - helpers.py: Tiny models, datasets and brute-force oracles
    - test_autograd.py: Tensor ops and reverse-mode gradients
    - test_synth_data.py: Dataset generation and persistence
    - test_model.py: Backbone, heads, replication and freezing
    - test_training.py: Losses, Adam and both training phases
    - test_cam_engine.py: CAM methods, clamping and composition
    - test_distortion.py: Softmax distortion experiments
    - test_metrics.py: Fidelity and localization metrics
    - test_checkpoint.py: Checkpoint layout and integrity
    - test_export.py: Heatmap and CSV export
    - test_engine.py: Engine commands and the CLI
"""

# Version information
__version__ = "0.1.0"

# Module description
__description__ = "Test suite for SigCAM Lab"
