"""
Heatmap and report export for SigCAM Lab.

Formats:
    PGM  binary P5, maxval 255, pixel = round(255 * v) of a [0, 1] map
    raw  u32 height, u32 width, then height*width little-endian f32 values
    CSV  written with pandas, floats as ``%.10g``

All writes go through a temp file and rename.
"""

import io
import os
import struct
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from sigcam_core.errors import DatasetIOError, ShapeError
from sigcam_core.evaluation_result import BBox
from sigcam_core.utils import atomic_write_bytes, atomic_write_text, minmax_normalize

CSV_FLOAT_FORMAT = "%.10g"


def quantize(heatmap: np.ndarray) -> np.ndarray:
    values = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    return np.rint(255.0 * values).astype(np.uint8)


def write_pgm(heatmap: np.ndarray, path: str) -> str:
    """8-bit binary PGM of a normalized map."""
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D map, got shape {heatmap.shape}")
    height, width = heatmap.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + quantize(heatmap).tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        payload = f.read()
    fields = payload.split(b"\n", 3)
    if len(fields) < 4 or fields[0] != b"P5":
        raise DatasetIOError("not a binary PGM file", path=path)
    width, height = (int(v) for v in fields[1].split())
    pixels = np.frombuffer(fields[3], dtype=np.uint8)
    if pixels.size != width * height:
        raise DatasetIOError(f"PGM payload has {pixels.size} bytes, expected {width * height}", path=path)
    return pixels.reshape(height, width)


def write_raw(heatmap: np.ndarray, path: str) -> str:
    """Lossless little-endian f32 dump with a (height, width) header."""
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2:
        raise ShapeError(f"raw export needs a 2-D map, got shape {heatmap.shape}")
    payload = struct.pack("<II", *heatmap.shape) + np.ascontiguousarray(heatmap, dtype="<f4").tobytes()
    atomic_write_bytes(path, payload)
    return path


def read_raw(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < 8:
        raise DatasetIOError("raw heatmap is truncated", path=path)
    height, width = struct.unpack_from("<II", payload, 0)
    if len(payload) != 8 + 4 * height * width:
        raise DatasetIOError("raw heatmap size does not match its header", path=path)
    return np.frombuffer(payload, dtype="<f4", offset=8).astype(np.float32).reshape(height, width)


def draw_box_outline(panel: np.ndarray, box: BBox, value: float = 1.0) -> np.ndarray:
    """One-pixel outline of ``box`` drawn in place."""
    panel[box.y0, box.x0:box.x1] = value
    panel[box.y1 - 1, box.x0:box.x1] = value
    panel[box.y0:box.y1, box.x0] = value
    panel[box.y0:box.y1, box.x1 - 1] = value
    return panel


def panel_strip(image: np.ndarray, heatmaps: Sequence[np.ndarray], gt_box: Optional[BBox] = None,
                gap: int = 1) -> np.ndarray:
    """Horizontal strip: grayscale input followed by each heatmap.

    A ground-truth box outline is drawn at full intensity on every tile.
    """
    gray = minmax_normalize(np.asarray(image, dtype=np.float64).mean(axis=0))
    tiles = [gray] + [np.asarray(h, dtype=np.float64) for h in heatmaps]
    height, width = gray.shape
    strip = np.zeros((height, len(tiles) * width + (len(tiles) - 1) * gap))
    for i, tile in enumerate(tiles):
        if tile.shape != (height, width):
            raise ShapeError(f"panel tile {i} has shape {tile.shape}, expected {(height, width)}")
        tile = tile.copy()
        if gt_box is not None:
            draw_box_outline(tile, gt_box)
        start = i * (width + gap)
        strip[:, start:start + width] = tile
    return strip


def frame_to_csv_text(frame: pd.DataFrame) -> str:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return buffer.getvalue()


def write_csv(rows, path: str) -> str:
    """Write a DataFrame or a list of row dicts as CSV."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    atomic_write_text(path, frame_to_csv_text(frame))
    return path


def read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DatasetIOError("CSV report not found", path=path)
    # only empty cells are missing; "n/a" is a real pos_weight_mode value
    return pd.read_csv(path, keep_default_na=False, na_values=[""])


def export_heatmaps(heatmaps: Dict[str, np.ndarray], output_dir: str, raw: bool = True) -> List[str]:
    """PGM (and raw) files named after the dict keys."""
    written = []
    for name, heatmap in sorted(heatmaps.items()):
        written.append(write_pgm(heatmap, os.path.join(output_dir, f"{name}.pgm")))
        if raw:
            written.append(write_raw(heatmap, os.path.join(output_dir, f"{name}.raw")))
    return written
