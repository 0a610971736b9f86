import os
import struct
import tempfile
import unittest

import numpy as np

from models.dual_branch import ModelPart, freeze, replicate_head
from sigcam_core.checkpoint import (
    checkpoint_fingerprint, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint,
    save_checkpoint,
)
from sigcam_core.errors import CheckpointError
from tests.helpers import tiny_model


def flip(payload: bytes, offset: int) -> bytes:
    data = bytearray(payload)
    data[offset] ^= 0xFF
    return bytes(data)


class TestCheckpointCodec(unittest.TestCase):
    def setUp(self):
        self.weight = np.arange(6, dtype=np.float32).reshape(2, 3)
        self.payload = encode_checkpoint({"w": self.weight}, {"note": "x"})

    def test_header(self):
        self.assertEqual(self.payload[:4], b"CAMB")
        self.assertEqual(struct.unpack_from("<II", self.payload, 4), (1, 1))

    def test_decode(self):
        checkpoint = decode_checkpoint(self.payload)
        np.testing.assert_array_equal(checkpoint.tensors["w"], self.weight)
        self.assertEqual(checkpoint.metadata["note"], "x")
        self.assertIn("hash.w", checkpoint.metadata)

    def test_bad_magic(self):
        with self.assertRaises(CheckpointError):
            decode_checkpoint(b"XXXX" + self.payload[4:])

    def test_bad_version(self):
        tampered = self.payload[:4] + struct.pack("<I", 2) + self.payload[8:]
        with self.assertRaises(CheckpointError):
            decode_checkpoint(tampered)

    def test_flipped_payload_byte(self):
        # header 12, name 2 + 1, dtype/rank 2, extents 8
        with self.assertRaises(CheckpointError) as ctx:
            decode_checkpoint(flip(self.payload, 25))
        self.assertIn("hash mismatch", ctx.exception.message)

    def test_truncated(self):
        for cut in (3, 10, 30, len(self.payload) - 1):
            with self.assertRaises(CheckpointError):
                decode_checkpoint(self.payload[:cut])

    def test_trailing_bytes(self):
        with self.assertRaises(CheckpointError):
            decode_checkpoint(self.payload + b"\x00")


class TestCheckpointFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.ckpt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        model = replicate_head(tiny_model(seed=2), seed=2)
        digest = save_checkpoint(model, self.path, {"phase": "sigmoid_finetune"})
        self.assertEqual(digest, checkpoint_fingerprint(self.path))
        loaded = load_checkpoint(self.path)
        original = model.named_parameters()
        restored = loaded.named_parameters()
        self.assertEqual(list(restored), list(original))
        for name, tensor in original.items():
            self.assertEqual(restored[name].data.tobytes(), tensor.data.tobytes())

    def test_metadata_preserved(self):
        save_checkpoint(tiny_model(), self.path, {"phase": "softmax_pretrain", "note": "two\nlines"})
        metadata = read_checkpoint(self.path).metadata
        self.assertEqual(metadata["phase"], "softmax_pretrain")
        self.assertEqual(metadata["note"], "two lines")
        self.assertEqual(metadata["frozen"], "")

    def test_frozen_parts_survive(self):
        model = replicate_head(tiny_model(), seed=1)
        freeze(model, ModelPart.BACKBONE)
        freeze(model, ModelPart.SOFTMAX_HEAD)
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(read_checkpoint(self.path).metadata["frozen"], "backbone,softmax_head")
        self.assertFalse(loaded.backbone.kernels[0].requires_grad)
        self.assertTrue(loaded.sigmoid_head.weight.requires_grad)
        loaded.verify_frozen()

    def test_saving_twice_is_identical(self):
        model = tiny_model(seed=3)
        first = save_checkpoint(model, self.path)
        second = save_checkpoint(model, self.path)
        self.assertEqual(first, second)

    def test_unknown_frozen_part(self):
        payload = encode_checkpoint({n: t.data for n, t in tiny_model().named_parameters().items()},
                                    {"frozen": "decoder"})
        with open(self.path, "wb") as f:
            f.write(payload)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            read_checkpoint(os.path.join(self.tmp.name, "absent.ckpt"))

    def test_truncated_file(self):
        save_checkpoint(tiny_model(), self.path)
        with open(self.path, "rb") as f:
            payload = f.read()
        with open(self.path, "wb") as f:
            f.write(payload[:len(payload) // 2])
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


if __name__ == '__main__':
    unittest.main()
