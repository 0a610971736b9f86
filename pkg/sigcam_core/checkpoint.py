"""
Checkpoint binary layout (all integers little-endian):

    magic       4 bytes  b"CAMB"
    version     u32
    count       u32      number of tensors
    per tensor:
        name_len  u16, name (utf-8)
        dtype     u8     1 = 32-bit real
        rank      u8
        extents   rank x u32
        payload   prod(extents) x f32
    meta_len    u32
    metadata    utf-8 ``key=value`` lines; ``hash.<tensor>`` holds the sha256
                of every tensor, ``frozen`` lists frozen model parts

Loading refuses any other magic or version and re-hashes every tensor.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from config.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DTYPE_TAG_F32
from models.backbone import Backbone, Head
from models.dual_branch import DualBranchModel, ModelPart, freeze
from .autograd import Tensor
from .errors import CheckpointError
from .utils import array_hash, atomic_write_bytes, sha256_hex

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, str] = field(default_factory=dict)


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def read(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def read_bytes(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk


def encode_checkpoint(tensors: Dict[str, np.ndarray], metadata: Dict[str, str]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    meta = dict(metadata)
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", DTYPE_TAG_F32, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
        meta[f"hash.{name}"] = array_hash(data.astype(np.float32))
    text = "".join(f"{key}={value}\n" for key, value in meta.items()).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode_checkpoint(payload: bytes, path: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, path)
    magic = reader.read_bytes(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version, count = reader.read("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.read("<H")
        name = reader.read_bytes(name_len).decode("utf-8", errors="replace")
        dtype_tag, rank = reader.read("<BB")
        if dtype_tag != DTYPE_TAG_F32:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {dtype_tag}")
        extents = reader.read(f"<{rank}I")
        size = int(np.prod(extents)) if rank else 1
        raw = reader.read_bytes(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(extents)
    (meta_len,) = reader.read("<I")
    try:
        text = reader.read_bytes(meta_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: metadata block is not utf-8")
    if reader.offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - reader.offset} trailing bytes")
    metadata = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed metadata line '{line}'")
        metadata[key] = value
    for name, array in tensors.items():
        expected = metadata.get(f"hash.{name}")
        if expected != array_hash(array):
            raise CheckpointError(f"{path}: hash mismatch for tensor {name}")
    return Checkpoint(tensors=tensors, metadata=metadata)


def model_tensors(model: DualBranchModel) -> Dict[str, np.ndarray]:
    return {name: t.data for name, t in model.named_parameters().items()}


def _frozen_parts(model: DualBranchModel) -> List[str]:
    parts = []
    for part in ModelPart:
        if part is ModelPart.SIGMOID_HEAD and model.sigmoid_head is None:
            continue
        names = model.part_parameters(part)
        if names and all(name in model.frozen_snapshot for name in names):
            parts.append(part.value)
    return parts


def save_checkpoint(model: DualBranchModel, path: str, metadata: Dict[str, str] = None) -> str:
    """Write ``model`` atomically; returns the sha256 of the file."""
    meta = {key: str(value).replace("\n", " ") for key, value in (metadata or {}).items()}
    meta["frozen"] = ",".join(_frozen_parts(model))
    payload = encode_checkpoint(model_tensors(model), meta)
    atomic_write_bytes(path, payload)
    digest = sha256_hex([payload])
    logger.info(f"saved checkpoint {path} ({len(payload)} bytes, sha256 {digest[:12]})")
    return digest


def read_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}")
    return decode_checkpoint(payload, path)


def checkpoint_fingerprint(path: str) -> str:
    with open(path, "rb") as f:
        return sha256_hex([f.read()])


def model_from_checkpoint(checkpoint: Checkpoint) -> DualBranchModel:
    tensors = checkpoint.tensors
    kernels, biases = [], []
    i = 0
    while f"backbone.conv{i}.weight" in tensors:
        kernels.append(Tensor(tensors[f"backbone.conv{i}.weight"], requires_grad=True))
        biases.append(Tensor(tensors[f"backbone.conv{i}.bias"], requires_grad=True))
        i += 1
    try:
        softmax_head = Head(weight=Tensor(tensors["softmax_head.weight"], requires_grad=True),
                            bias=Tensor(tensors["softmax_head.bias"], requires_grad=True))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc.args[0]}")
    sigmoid_head = None
    if "sigmoid_head.weight" in tensors:
        sigmoid_head = Head(weight=Tensor(tensors["sigmoid_head.weight"], requires_grad=True),
                            bias=Tensor(tensors["sigmoid_head.bias"], requires_grad=True))
    if not kernels:
        raise CheckpointError("checkpoint has no backbone tensors")
    model = DualBranchModel(Backbone(kernels, biases), softmax_head, sigmoid_head)
    for part in filter(None, checkpoint.metadata.get("frozen", "").split(",")):
        try:
            freeze(model, ModelPart(part))
        except ValueError:
            raise CheckpointError(f"checkpoint lists unknown frozen part '{part}'")
    return model


def load_checkpoint(path: str) -> DualBranchModel:
    return model_from_checkpoint(read_checkpoint(path))
