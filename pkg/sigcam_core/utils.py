import hashlib
import os
import tempfile
from typing import Iterable

import numpy as np


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_hex(chunks: Iterable[bytes]) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def array_hash(array: np.ndarray) -> str:
    """Bit-level hash of an array (dtype, shape and little-endian payload)."""
    le = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False)
    header = f"{le.dtype.str}|{le.shape}".encode("ascii")
    return sha256_hex([header, le.tobytes()])


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """(M - min) / (max - min); a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def bilinear_upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D map.

    Output pixel (r, c) samples the source at
    (r * (P - 1) / (H - 1), c * (Q - 1) / (W - 1)); a source extent of 1
    replicates that row/column.
    """
    values = np.asarray(values, dtype=np.float64)
    p, q = values.shape

    def coords(n_out: int, n_in: int):
        if n_in == 1 or n_out == 1:
            zeros = np.zeros(n_out, dtype=np.int64)
            return zeros, zeros, np.zeros(n_out)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        low = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
        return low, low + 1, pos - low

    r0, r1, rf = coords(height, p)
    c0, c1, cf = coords(width, q)
    rows = values[r0] * (1 - rf)[:, None] + values[r1] * rf[:, None]
    return rows[:, c0] * (1 - cf)[None, :] + rows[:, c1] * cf[None, :]


def format_duration(seconds: float) -> str:
    """Format a wall-clock duration for console summaries."""
    if seconds < 1:
        return f"{seconds * 1000:.1f} ms"
    elif seconds < 60:
        return f"{seconds:.1f} s"
    else:
        return f"{seconds / 60:.1f} min"
