"""
Tests for the `vprtk.heads` module.
"""
import os

import pytest

import torch

from vprtk.config import Configuration, HeadConfiguration, set_hydra_configuration
from vprtk.heads import GeM, LocalAdaptation, gem_pool, global_feature, local_adaptation
from vprtk.models import instantiate_model


class TestHeads:
    def test_gem_pool_p1_is_mean(self):
        """Tests the `vprtk.heads.gem_pool` function."""
        fm = torch.rand(2, 4, 5, 3, dtype=torch.float64) + 0.1
        torch.testing.assert_close(gem_pool(fm, p=1.0), fm.mean(dim=(1, 2)))

    def test_gem_pool_large_p_tends_to_max(self):
        fm = torch.rand(1, 3, 3, 2, dtype=torch.float64) + 0.5
        pooled = gem_pool(fm, p=200.0)
        torch.testing.assert_close(pooled, fm.amax(dim=(1, 2)), rtol=2e-2, atol=0.0)

    def test_gem_pool_clamps_negative_activations(self):
        fm = -torch.ones(1, 2, 2, 1, dtype=torch.float64)
        pooled = gem_pool(fm, p=3.0, eps=1e-6)
        torch.testing.assert_close(pooled, torch.full((1, 1), 1e-6, dtype=torch.float64))

    def test_gem_pool_rejects_bad_arguments(self):
        fm = torch.ones(1, 2, 2, 1, dtype=torch.float64)
        with pytest.raises(ValueError):
            gem_pool(fm, p=0.5)
        with pytest.raises(ValueError):
            gem_pool(fm, p=3.0, eps=0.0)

    def test_gem_module(self):
        fixed = GeM(p=3.0)
        assert "p" in dict(fixed.named_buffers())
        assert len(list(fixed.parameters())) == 0
        learnable = GeM(p=3.0, learnable=True)
        assert len(list(learnable.parameters())) == 1
        fm = torch.rand(2, 3, 3, 4) + 0.1
        torch.testing.assert_close(fixed(fm), learnable(fm).detach())

    def test_global_feature(self):
        """Tests the `vprtk.heads.global_feature` function."""
        fm = torch.rand(3, 4, 4, 8, dtype=torch.float64)
        g = global_feature(fm)
        torch.testing.assert_close(g.norm(dim=-1), torch.ones(3, dtype=torch.float64))

        cls = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        g = global_feature(torch.zeros(1, 2, 2, 2), mode="class_token", class_token=cls)
        torch.testing.assert_close(g, torch.tensor([[0.6, 0.8]], dtype=torch.float64))

        with pytest.raises(ValueError):
            global_feature(fm, mode="class_token")
        with pytest.raises(ValueError):
            global_feature(fm, mode="netvlad")

    def test_local_adaptation_tiny(self, test_cfg: Configuration):
        """Tests the `vprtk.heads.LocalAdaptation` module on the tiny preset."""
        head = LocalAdaptation(test_cfg.models.backbone.embed_dim, test_cfg.models.head)
        head = head.to(torch.float64)
        grid = test_cfg.models.backbone.image_size // test_cfg.models.backbone.patch_size
        fm = torch.randn(2, grid, grid, test_cfg.models.backbone.embed_dim, dtype=torch.float64)
        out = head(fm)
        assert head.output_size(grid) == 13
        assert out.shape == (2, 13, 13, test_cfg.models.head.local_dim)
        norms = out.norm(dim=-1)
        assert ((norms - 1.0).abs() < 1e-9).all()

    def test_local_grid_large_shape(self, test_config_dir: os.PathLike):
        cfg = set_hydra_configuration(
            config_name="large", init_method_kwargs={"config_dir": test_config_dir}
        )
        model = instantiate_model(cfg.models, dtype=torch.float32, device="meta")
        assert model.backbone.grid_size == 16
        assert model.local_grid_size == 61

    def test_local_adaptation_rejects_wrong_channels(self):
        head = LocalAdaptation(8, HeadConfiguration(mid_channels=6, local_dim=4))
        with pytest.raises(ValueError):
            head(torch.zeros(1, 3, 3, 5))

    @pytest.mark.slow
    def test_large_forward_shapes(self, test_config_dir: os.PathLike):
        """A real forward pass of the ViT-L/14 preset with random parameters."""
        cfg = set_hydra_configuration(
            config_name="large", init_method_kwargs={"config_dir": test_config_dir}
        )
        model = instantiate_model(cfg.models, dtype=torch.float32, seed=0).eval()
        images = torch.rand(1, 224, 224, 3, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            out = model(images)
        assert out.feature_map.shape == (1, 16, 16, 1024)
        assert out.local_features.shape == (1, 61, 61, 128)
        assert out.global_features.shape == (1, 1024)

    @pytest.mark.parametrize("seed", range(5))
    def test_gem_pool_monotone_in_p(self, seed: int):
        generator = torch.Generator().manual_seed(seed)
        fm = torch.rand(2, 4, 4, 6, generator=generator, dtype=torch.float64) * 2.0 - 0.5
        ps = [1.0, 1.5, 2.0, 3.0, 5.0, 8.0]
        pooled = torch.stack([gem_pool(fm, p=p) for p in ps])
        assert (pooled[1:] >= pooled[:-1] - 1e-12).all()

    @pytest.mark.parametrize("scale", [0.5, 2.0, 37.0])
    def test_global_feature_scale_invariant(self, scale: float):
        fm = torch.rand(3, 4, 4, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        fm = fm + 0.1
        torch.testing.assert_close(global_feature(scale * fm), global_feature(fm))

    @pytest.mark.parametrize("side", [4, 7, 13, 20, 32])
    def test_local_adaptation_output_sizes(self, side: int):
        """Tests the `vprtk.heads.local_adaptation` function over grid sides."""
        head_cfg = HeadConfiguration(mid_channels=6, local_dim=4)
        torch.manual_seed(side)
        head = LocalAdaptation(8, head_cfg).to(torch.float64)
        fm = torch.randn(1, side, side, 8, dtype=torch.float64)
        out = local_adaptation(fm, head)
        # two stride-2 up-convolutions: side -> 2 side - 1 -> 4 side - 3
        assert head.output_size(side) == 4 * side - 3
        assert out.shape == (1, 4 * side - 3, 4 * side - 3, 4)
