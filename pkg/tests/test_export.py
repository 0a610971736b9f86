import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from sigcam_core.errors import DatasetIOError, ShapeError
from sigcam_core.evaluation_result import BBox
from visualizations.export import (
    export_heatmaps, panel_strip, quantize, read_csv, read_pgm, read_raw, write_csv, write_pgm, write_raw,
)
from tests.helpers import philox


class TestHeatmapFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_quantize(self):
        np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 1.5, -1.0])), [0, 128, 255, 255, 0])

    def test_constant_map_is_all_zero_pgm(self):
        write_pgm(np.zeros((4, 6)), self.path("zero.pgm"))
        with open(self.path("zero.pgm"), "rb") as f:
            payload = f.read()
        self.assertTrue(payload.startswith(b"P5\n6 4\n255\n"))
        self.assertEqual(payload[len(b"P5\n6 4\n255\n"):], bytes(24))
        pixels = read_pgm(self.path("zero.pgm"))
        self.assertEqual(pixels.shape, (4, 6))
        self.assertEqual(pixels.max(), 0)

    def test_pgm_values(self):
        heatmap = philox(1).random((5, 3))
        write_pgm(heatmap, self.path("map.pgm"))
        np.testing.assert_array_equal(read_pgm(self.path("map.pgm")), quantize(heatmap))

    def test_raw_is_lossless(self):
        heatmap = philox(2).random((7, 5)).astype(np.float32)
        write_raw(heatmap, self.path("map.raw"))
        self.assertEqual(os.path.getsize(self.path("map.raw")), 8 + 4 * 35)
        self.assertEqual(read_raw(self.path("map.raw")).tobytes(), heatmap.tobytes())

    def test_raw_size_mismatch(self):
        write_raw(np.zeros((2, 2)), self.path("map.raw"))
        with open(self.path("map.raw"), "ab") as f:
            f.write(b"\x00")
        with self.assertRaises(DatasetIOError):
            read_raw(self.path("map.raw"))

    def test_wrong_rank(self):
        with self.assertRaises(ShapeError):
            write_pgm(np.zeros((1, 2, 2)), self.path("bad.pgm"))

    def test_export_heatmaps(self):
        written = export_heatmaps({"b": np.zeros((2, 2)), "a": np.ones((2, 2))}, self.path("maps"))
        self.assertEqual([os.path.basename(p) for p in written], ["a.pgm", "a.raw", "b.pgm", "b.raw"])
        self.assertTrue(all(os.path.exists(p) for p in written))


class TestPanels(unittest.TestCase):
    def test_strip_shape_and_outline(self):
        image = philox(3).random((3, 8, 8))
        heatmaps = [np.zeros((8, 8)), np.zeros((8, 8))]
        strip = panel_strip(image, heatmaps, gt_box=BBox(2, 2, 6, 6), gap=1)
        self.assertEqual(strip.shape, (8, 3 * 8 + 2))
        tile = strip[:, 9:17]
        self.assertEqual(tile[2, 2], 1.0)
        self.assertEqual(tile[5, 5], 1.0)
        self.assertEqual(tile[3, 3], 0.0)
        np.testing.assert_array_equal(strip[:, 8], 0)

    def test_tile_mismatch(self):
        with self.assertRaises(ShapeError):
            panel_strip(np.zeros((3, 8, 8)), [np.zeros((4, 4))])


class TestCsv(unittest.TestCase):
    def test_float_format_and_read_back(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "report.csv")
            write_csv([{"method": "cam", "value": 1 / 3}, {"method": "gradcam", "value": 2.0}], path)
            with open(path) as f:
                text = f.read()
            self.assertEqual(text, "method,value\ncam,0.3333333333\ngradcam,2\n")
            frame = read_csv(path)
            self.assertIsInstance(frame, pd.DataFrame)
            self.assertEqual(list(frame["method"]), ["cam", "gradcam"])

    def test_missing_csv(self):
        with self.assertRaises(DatasetIOError):
            read_csv("/nonexistent/report.csv")


if __name__ == '__main__':
    unittest.main()
