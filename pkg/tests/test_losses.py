"""
Tests for the `vprtk.losses` module.
"""
import math

import pytest

import torch

from vprtk.config import BACKBONE_GROUPS, Configuration, GradcheckConfiguration, LossConfiguration
from vprtk.losses import (
    FeatureSample,
    GradcheckError,
    TripletBatch,
    TripletImages,
    check_model_gradients,
    combined_loss,
    finite_diff_gradcheck,
    global_loss,
    local_loss,
    model_triplet_loss,
)
from vprtk.models import PlaceRecognitionModel, apply_freeze_policy, randomize_adapters
from vprtk.tensor import l2_normalize


def _sample(seed: int, dim: int = 6, grid: int = 3, channels: int = 4) -> FeatureSample:
    generator = torch.Generator().manual_seed(seed)
    return FeatureSample(
        global_feature=l2_normalize(torch.randn(dim, generator=generator, dtype=torch.float64)),
        local_grid=l2_normalize(
            torch.randn(grid, grid, channels, generator=generator, dtype=torch.float64)
        ),
    )


@pytest.fixture
def active_batch() -> TripletBatch:
    """A triplet whose global and local hinges are all active."""
    query, positive = _sample(0), _sample(1)
    negatives = []
    for seed in (2, 3):
        negative = _sample(seed)
        # a negative whose local grid resembles the query has more similar mutual matches
        negative.local_grid = l2_normalize(query.local_grid + 0.05 * negative.local_grid)
        negatives.append(negative)
    return TripletBatch(query=query, positive=positive, negatives=negatives)


def _tiny_images(test_cfg: Configuration, batch: int = 1, negatives: int = 2) -> TripletImages:
    size = test_cfg.models.backbone.image_size
    generator = torch.Generator().manual_seed(7)

    def rand(*shape):
        return torch.rand(*shape, size, size, 3, generator=generator, dtype=torch.float64)

    return TripletImages(query=rand(batch), positive=rand(batch), negatives=rand(batch, negatives))


class TestLosses:
    def test_global_loss(self):
        """Tests the `vprtk.losses.global_loss` function."""
        grid = torch.zeros(1, 1, 1, dtype=torch.float64)

        def sample(*values):
            return FeatureSample(torch.tensor(values, dtype=torch.float64), grid)

        batch = TripletBatch(
            query=sample(1.0, 0.0),
            positive=sample(0.8, 0.6),
            negatives=[sample(0.0, 1.0), sample(-1.0, 0.0)],
        )
        d_qp = math.sqrt(0.4)
        expected = max(d_qp + 1.0 - math.sqrt(2.0), 0.0) + max(d_qp + 1.0 - 2.0, 0.0)
        assert global_loss(batch, margin=1.0) == pytest.approx(expected)
        assert global_loss(batch, margin=0.1) == 0.0

    def test_triplet_batch_needs_negatives(self):
        with pytest.raises(ValueError):
            TripletBatch(query=_sample(0), positive=_sample(1), negatives=[])

    def test_local_loss(self, active_batch: TripletBatch):
        """Tests the `vprtk.losses.local_loss` function."""
        assert local_loss(active_batch) > 0
        # swapping roles makes the positive the closest grid
        swapped = TripletBatch(
            query=active_batch.query,
            positive=active_batch.negatives[0],
            negatives=[active_batch.positive],
        )
        assert local_loss(swapped) == 0.0

    def test_local_loss_identical_grids(self):
        query = _sample(0)
        batch = TripletBatch(query=query, positive=query, negatives=[query])
        assert local_loss(batch) == 0.0

    def test_combined_loss_value(self, active_batch: TripletBatch):
        """Tests the `vprtk.losses.combined_loss` function."""
        loss_cfg = LossConfiguration(margin=1.0, weight=0.5)
        out = combined_loss(active_batch, loss_cfg)
        assert out.global_value == pytest.approx(global_loss(active_batch, margin=1.0))
        assert out.local_value == pytest.approx(local_loss(active_batch))
        assert out.value == pytest.approx(out.global_value + 0.5 * out.local_value)
        assert len(out.hinge_arguments) == 2 * len(active_batch.negatives)

    def test_combined_loss_zero_weight(self, active_batch: TripletBatch):
        out = combined_loss(active_batch, LossConfiguration(margin=2.0, weight=0.0))
        assert out.value == pytest.approx(out.global_value)
        assert torch.count_nonzero(out.query.local_grid) == 0
        assert torch.count_nonzero(out.query.global_feature) > 0

    def test_combined_loss_gradients(self, active_batch: TripletBatch):
        """Closed-form feature gradients agree with central differences."""
        # unit vectors are at most 2 apart, so a margin of 2 keeps every global hinge active
        loss_cfg = LossConfiguration(margin=2.0, weight=1.0)
        out = combined_loss(active_batch, loss_cfg)
        samples = [active_batch.query, active_batch.positive, *active_batch.negatives]
        grads = [out.query, out.positive, *out.negatives]
        params, analytic = [], []
        for sample, grad in zip(samples, grads):
            params += [sample.global_feature, sample.local_grid]
            analytic += [grad.global_feature, grad.local_grid]

        report = finite_diff_gradcheck(
            lambda: combined_loss(active_batch, loss_cfg),
            params,
            analytic,
            step=1e-6,
            samples=120,
        )
        assert report.checked > 0
        assert report.passed(1e-5)

    def test_finite_diff_gradcheck_restores_parameters(self):
        """Tests the `vprtk.losses.finite_diff_gradcheck` function on a quadratic."""
        x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        before = x.clone()
        report = finite_diff_gradcheck(lambda: float((x**2).sum()), [x], [2 * x.clone()])
        assert report.checked == 3
        assert report.passed(1e-6)
        assert torch.equal(x, before)

        wrong = finite_diff_gradcheck(lambda: float((x**2).sum()), [x], [x.clone()])
        assert not wrong.passed(1e-4)

    def test_finite_diff_gradcheck_errors(self):
        x = torch.ones(2, dtype=torch.float64)
        with pytest.raises(GradcheckError):
            finite_diff_gradcheck(lambda: float("nan"), [x], [x.clone()])
        with pytest.raises(ValueError):
            finite_diff_gradcheck(lambda: 0.0, [x], [x.clone()], step=0.0)

    def test_model_triplet_loss(self, test_cfg: Configuration, tiny_model: PlaceRecognitionModel):
        """Tests the `vprtk.losses.model_triplet_loss` function."""
        apply_freeze_policy(tiny_model, BACKBONE_GROUPS)
        randomize_adapters(tiny_model)
        images = _tiny_images(test_cfg, batch=2)
        out = model_triplet_loss(tiny_model, images, LossConfiguration(margin=0.5))
        assert out.global_features.shape[0] == 2 * (2 + 2)
        assert math.isfinite(out.value)
        out.backward()
        for name, param in tiny_model.named_parameters():
            if name.startswith("backbone.") and ".adapter" not in name:
                assert param.grad is None
        assert tiny_model.backbone.blocks[0].adapter2.up.weight.grad is not None

    def test_check_model_gradients(self, test_cfg: Configuration, tiny_model: PlaceRecognitionModel):
        """Tests the `vprtk.losses.check_model_gradients` function end to end."""
        apply_freeze_policy(tiny_model, BACKBONE_GROUPS)
        randomize_adapters(tiny_model)
        gradcheck_cfg = GradcheckConfiguration(samples=24, step=1e-5, tolerance=1e-4)
        report = check_model_gradients(
            tiny_model, _tiny_images(test_cfg), LossConfiguration(margin=0.5), gradcheck_cfg
        )
        assert report.checked + report.skipped == 24
        assert report.passed(gradcheck_cfg.tolerance)
