"""
Deterministic synthetic shapes dataset with exact localization ground truth.

Each class is one geometric or texture motif placed at a random position and
scale on a noisy background, optionally with small class-irrelevant
distractor blobs. Sample ``i`` of a split depends only on
(seed, split, i): its random stream is a Philox generator keyed by that
triple.

On-disk layout (``save_dataset`` / ``load_dataset``):

* ``manifest.csv`` - one line per sample: ``index,label,x0,y0,x1,y1,blob``
* ``<blob>`` - 16-byte header (``SYNS``, version, H, W as little-endian
  u32) followed by the image (3*H*W) and the mask (H*W) as little-endian
  float32.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from config.constants import (
    DATASET_BLOB_MAGIC, DATASET_BLOB_VERSION, DATASET_MANIFEST_NAME,
    DEFAULT_IMAGE_SIZE, DEFAULT_NUM_CLASSES, DEFAULT_SPLIT_SIZES, MOTIFS, SPLIT_IDS,
)
from .errors import ConfigError, DatasetIOError
from .evaluation_result import BBox
from .utils import atomic_write_bytes, atomic_write_text, sha256_hex

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIII")


@dataclass
class DatasetSpec:
    """Generator parameters; every field is addressable from a config file."""

    num_classes: int = DEFAULT_NUM_CLASSES
    image_size: int = DEFAULT_IMAGE_SIZE
    train_size: int = DEFAULT_SPLIT_SIZES["train"]
    val_size: int = DEFAULT_SPLIT_SIZES["val"]
    test_size: int = DEFAULT_SPLIT_SIZES["test"]
    seed: int = 17
    size_min: float = 0.3
    size_max: float = 0.6
    noise_amplitude: float = 0.15
    distractors: int = 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", key="num_classes")
        if self.num_classes > len(MOTIFS):
            raise ConfigError(f"num_classes {self.num_classes} exceeds the {len(MOTIFS)} available motifs",
                              key="num_classes")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8", key="image_size")
        if not (0 < self.size_min <= self.size_max < 1):
            raise ConfigError("size range must satisfy 0 < size_min <= size_max < 1", key="size_min")
        if self.noise_amplitude < 0:
            raise ConfigError("noise_amplitude must be >= 0", key="noise_amplitude")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0", key="distractors")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must fit in 64 bits", key="seed")

    def split_size(self, split: str) -> int:
        if split not in SPLIT_IDS:
            raise ConfigError(f"unknown split '{split}'", key="split")
        return getattr(self, f"{split}_size")


@dataclass
class SynthSample:
    """One image with its label, tight box and object mask."""

    image: np.ndarray       # float32 [3, H, W] in [0, 1]
    label: int
    gt_box: BBox
    gt_mask: np.ndarray     # bool [H, W]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SynthSample):
            return NotImplemented
        return (self.label == other.label and self.gt_box == other.gt_box
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt_mask, other.gt_mask))


# ---------------------------------------------------------------------------
# Motifs: each returns (region mask, appearance pattern in [0, 1])
# ---------------------------------------------------------------------------

def _solid(region: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return region, np.ones(region.shape, dtype=np.float32)


def _disk(dy, dx, r):
    return _solid(dy ** 2 + dx ** 2 <= r ** 2)


def _ring(dy, dx, r):
    dist2 = dy ** 2 + dx ** 2
    return _solid((dist2 <= r ** 2) & (dist2 >= (0.55 * r) ** 2))


def _square(dy, dx, r):
    return _solid((np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r))


def _cross(dy, dx, r):
    arm = max(r / 4.0, 0.75)
    horizontal = (np.abs(dy) <= arm) & (np.abs(dx) <= r)
    vertical = (np.abs(dx) <= arm) & (np.abs(dy) <= r)
    return _solid(horizontal | vertical)


def _triangle(dy, dx, r):
    return _solid((dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0))


def _patch(dy, dx, r):
    return (np.abs(dy) <= r) & (np.abs(dx) <= r)


def _stripes_patch(dy, dx, r):
    region = _patch(dy, dx, r)
    pattern = np.where(np.floor(dx / 2.0) % 2 == 0, 1.0, 0.2).astype(np.float32)
    return region, pattern


def _checker_patch(dy, dx, r):
    region = _patch(dy, dx, r)
    parity = (np.floor(dx / 2.0) + np.floor(dy / 2.0)) % 2
    pattern = np.where(parity == 0, 1.0, 0.2).astype(np.float32)
    return region, pattern


def _diagonal_bar(dy, dx, r):
    return _solid((np.abs(dy - dx) <= max(0.35 * r, 1.0)) & _patch(dy, dx, r))


MOTIF_DRAWERS: Dict[str, Callable] = {
    "disk": _disk,
    "ring": _ring,
    "square": _square,
    "cross": _cross,
    "triangle": _triangle,
    "stripes_patch": _stripes_patch,
    "checker_patch": _checker_patch,
    "diagonal_bar": _diagonal_bar,
}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Counter-based stream for one sample, keyed by (seed, split, index)."""
    key = (int(seed) << 64) | (SPLIT_IDS[split] << 32) | int(index)
    return np.random.Generator(np.random.Philox(key=key))


def _render_sample(spec: DatasetSpec, rng: np.random.Generator) -> SynthSample:
    size = spec.image_size
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32), np.arange(size, dtype=np.float32),
                         indexing="ij")

    label = int(rng.integers(spec.num_classes))

    # Background: flat tint, a low-frequency wave and per-pixel noise.
    tint = 0.15 + 0.2 * rng.random(3, dtype=np.float32)
    phase = rng.random(2, dtype=np.float32) * np.float32(2 * np.pi)
    wave = 0.05 * np.sin(yy / 5.0 + phase[0]) * np.cos(xx / 7.0 + phase[1])
    noise = spec.noise_amplitude * (rng.random((3, size, size), dtype=np.float32) - 0.5)
    image = tint[:, None, None] + wave[None] + noise

    for _ in range(spec.distractors):
        radius = 1.0 + rng.random(dtype=np.float32)
        cy, cx = rng.random(2, dtype=np.float32) * (size - 1)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        color = 0.4 + 0.6 * rng.random(3, dtype=np.float32)
        image[:, blob] = color[:, None]

    draw = MOTIF_DRAWERS[MOTIFS[label]]
    while True:
        fraction = spec.size_min + (spec.size_max - spec.size_min) * rng.random(dtype=np.float32)
        radius = max(fraction * size / 2.0, 2.0)
        low, high = radius, size - 1 - radius
        cy, cx = low + (high - low) * rng.random(2, dtype=np.float32)
        region, pattern = draw(yy - cy, xx - cx, radius)
        if region.any():
            break

    color = 0.65 + 0.35 * rng.random(3, dtype=np.float32)
    image[:, region] = (color[:, None] * pattern[region][None, :])
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return SynthSample(image=image, label=label, gt_box=BBox.from_mask(region), gt_mask=region.copy())


def generate(spec: DatasetSpec, split: str) -> List[SynthSample]:
    """Generate every sample of ``split``; identical for identical specs."""
    spec.validate()
    count = spec.split_size(split)
    samples = [_render_sample(spec, sample_rng(spec.seed, split, i)) for i in range(count)]
    logger.info(f"generated {count} '{split}' samples ({spec.num_classes} classes, {spec.image_size}px)")
    return samples


def stack_images(samples: List[SynthSample]) -> Tuple[np.ndarray, np.ndarray]:
    """[N,3,H,W] float32 images and [N] int64 labels."""
    if not samples:
        return np.zeros((0, 3, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _blob_name(index: int) -> str:
    return f"sample_{index:06d}.bin"


def save_dataset(samples: List[SynthSample], path: str) -> str:
    """Write blobs then the manifest into directory ``path``; returns the manifest path."""
    os.makedirs(path, exist_ok=True)
    lines = []
    for index, sample in enumerate(samples):
        _, height, width = sample.image.shape
        payload = (_HEADER.pack(DATASET_BLOB_MAGIC, DATASET_BLOB_VERSION, height, width)
                   + sample.image.astype("<f4").tobytes()
                   + sample.gt_mask.astype("<f4").tobytes())
        name = _blob_name(index)
        atomic_write_bytes(os.path.join(path, name), payload)
        box = sample.gt_box
        lines.append(f"{index},{sample.label},{box.x0},{box.y0},{box.x1},{box.y1},{name}\n")
    manifest = os.path.join(path, DATASET_MANIFEST_NAME)
    atomic_write_text(manifest, "".join(lines))
    logger.info(f"saved {len(samples)} samples to {path}")
    return manifest


def _read_blob(blob_path: str) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(blob_path):
        raise DatasetIOError("missing blob", blob_path)
    with open(blob_path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetIOError("truncated blob header", blob_path)
    magic, version, height, width = _HEADER.unpack_from(raw)
    if magic != DATASET_BLOB_MAGIC:
        raise DatasetIOError(f"bad blob magic {magic!r}", blob_path)
    if version != DATASET_BLOB_VERSION:
        raise DatasetIOError(f"unsupported blob version {version}", blob_path)
    expected = _HEADER.size + 4 * (3 * height * width + height * width)
    if len(raw) != expected:
        raise DatasetIOError(f"truncated blob ({len(raw)} of {expected} bytes)", blob_path)
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    image = body[:3 * height * width].reshape(3, height, width).astype(np.float32)
    mask = body[3 * height * width:].reshape(height, width) != 0
    return image, mask


def load_dataset(path: str) -> List[SynthSample]:
    """Read a directory written by ``save_dataset``."""
    manifest = os.path.join(path, DATASET_MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DatasetIOError("missing manifest", manifest)
    samples = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 7:
                raise DatasetIOError(f"malformed manifest line {line_no}", manifest)
            try:
                _, label, x0, y0, x1, y1 = (int(v) for v in fields[:6])
            except ValueError:
                raise DatasetIOError(f"malformed manifest line {line_no}", manifest)
            image, mask = _read_blob(os.path.join(path, fields[6]))
            samples.append(SynthSample(image=image, label=label, gt_box=BBox(x0, y0, x1, y1), gt_mask=mask))
    logger.info(f"loaded {len(samples)} samples from {path}")
    return samples


def dataset_fingerprint(path: str) -> str:
    """sha256 over the manifest and every blob it references, in order."""
    manifest = os.path.join(path, DATASET_MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise DatasetIOError("missing manifest", manifest)

    def chunks():
        with open(manifest, "rb") as f:
            text = f.read()
        yield text
        for line in text.decode("utf-8").splitlines():
            if line.strip():
                with open(os.path.join(path, line.split(",")[-1]), "rb") as blob:
                    yield blob.read()

    return sha256_hex(chunks())
