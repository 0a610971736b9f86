"""
Visualizations Module for SigCAM Lab

Heatmap and report export. Plotting is out of scope; heatmaps are written as
binary PGM images and lossless raw dumps, reports as CSV.

Components:
    - export.py: PGM/raw heatmap export, comparison panels, CSV reports
"""

from .export import (
    export_heatmaps,
    panel_strip,
    read_csv,
    read_pgm,
    read_raw,
    write_csv,
    write_pgm,
    write_raw,
)

__all__ = [
    'export_heatmaps',
    'panel_strip',
    'read_csv',
    'read_pgm',
    'read_raw',
    'write_csv',
    'write_pgm',
    'write_raw',
]
