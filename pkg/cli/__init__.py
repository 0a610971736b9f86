"""
CLI Module for SigCAM Lab

This module contains the command-line interface: dataset generation,
two-phase training, heatmap export, distortion experiments, evaluation
and report joining.

Components:
    - main.py: Main CLI entry point with one subcommand per lab step
"""

# Version information
__version__ = "0.1.0"

# Module description
__description__ = "Command-line interface for SigCAM Lab"
