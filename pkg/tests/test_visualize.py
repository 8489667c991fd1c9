"""
Tests for the `vprtk.visualize` module.
"""
import numpy as np
import pandas as pd
import pytest
from PIL import Image

import torch

from vprtk.visualize import channel_mean_map, emit_heatmap


class TestVisualize:
    def test_channel_mean_map_constant(self):
        """Tests the `vprtk.visualize.channel_mean_map` function."""
        heatmap = channel_mean_map(np.full((4, 5, 3), 2.0))
        np.testing.assert_array_equal(heatmap, np.full((4, 5), 0.5))

    def test_channel_mean_map_hot_spot(self):
        fm = torch.zeros(6, 6, 8)
        fm[2, 3] = 5.0
        heatmap = channel_mean_map(fm)
        assert heatmap[2, 3] == 1.0
        assert heatmap.sum() == 1.0

    def test_channel_mean_map_rejects_batches(self):
        with pytest.raises(ValueError):
            channel_mean_map(np.zeros((1, 4, 4, 3)))

    def test_emit_heatmap(self, tmp_path):
        """Tests the `vprtk.visualize.emit_heatmap` function."""
        rng = np.random.default_rng(0)
        prefix = tmp_path / "maps" / "place"
        heatmap = emit_heatmap(rng.normal(size=(8, 8, 16)), prefix, colormap="jet")
        assert heatmap.min() == 0.0 and heatmap.max() == 1.0

        csv = pd.read_csv(f"{prefix}.csv", header=None)
        assert csv.shape == (8, 8)
        np.testing.assert_allclose(csv.to_numpy(), heatmap, atol=1e-6)

        with Image.open(f"{prefix}.pgm") as image:
            assert image.mode == "L"
            assert image.size == (8, 8)
            assert np.asarray(image).max() == 255
        assert (tmp_path / "maps" / "place.png").exists()

    def test_emit_heatmap_without_colormap(self, tmp_path):
        emit_heatmap(np.ones((3, 3, 2)), tmp_path / "flat")
        assert (tmp_path / "flat.csv").exists()
        assert not (tmp_path / "flat.png").exists()
