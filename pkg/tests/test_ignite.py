"""
Tests for the `vprtk.ignite` module.
"""
import os
from copy import deepcopy

import numpy as np
import pandas as pd
import pytest

import torch

from vprtk.config import Configuration
from vprtk.datasets import load_manifest
from vprtk.ignite import HISTORY_COLUMNS, TrainingData, adam_step, train, validation_recall
from vprtk.models import PlaceRecognitionModel, parameter_group


@pytest.fixture
def training_data(synth_world: str) -> TrainingData:
    return TrainingData.from_manifest(load_manifest(synth_world), synth_world)


def scripted_validation(r5_values, snapshots: dict = None):
    """Replays validation R@5 values epoch by epoch, recording the parameters seen at each call."""
    values = iter(r5_values)
    calls = [0]

    def validation_fn(model: torch.nn.Module) -> dict:
        calls[0] += 1
        if snapshots is not None:
            snapshots[calls[0]] = deepcopy(model.state_dict())
        r5 = next(values)
        return {1: r5 / 2, 5: r5}

    return validation_fn


class TestIgnite:
    def test_adam_step_zero_gradient(self):
        """Tests the `vprtk.ignite.adam_step` function."""
        param = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        optimizer = torch.optim.Adam([param], lr=1e-3)
        param.grad = torch.zeros_like(param)
        assert adam_step(optimizer)
        assert torch.equal(param.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))

    def test_adam_step_constant_gradient(self):
        param = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        optimizer = torch.optim.Adam([param], lr=1e-3)
        for step in range(1, 4):
            param.grad = torch.tensor([2.0, -0.5], dtype=torch.float64)
            assert adam_step(optimizer)
            # bias-corrected Adam moves by about lr * sign(g) per step
            expected = torch.tensor([-1e-3, 1e-3], dtype=torch.float64) * step
            torch.testing.assert_close(param.detach(), expected, rtol=1e-5, atol=0.0)

    def test_adam_step_rejects_non_finite(self):
        param = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
        optimizer = torch.optim.Adam([param], lr=1e-3)
        param.grad = torch.tensor([0.1, float("inf"), 0.1], dtype=torch.float64)
        assert not adam_step(optimizer)
        assert torch.equal(param.detach(), torch.ones(3, dtype=torch.float64))
        assert param.grad is None

    def test_training_data(self, training_data: TrainingData, test_cfg: Configuration):
        """Tests the `vprtk.ignite.TrainingData.from_manifest` function."""
        world_cfg = test_cfg.datasets
        assert len(training_data.database_tags) == world_cfg.num_places * world_cfg.database_variants
        assert len(training_data.train_tags) == world_cfg.num_places * world_cfg.train_variants
        assert training_data.train_images.shape[1:] == (16, 16, 3)
        assert training_data.database_latlon.shape == (len(training_data.database_ids), 2)

    def test_validation_recall(
        self, training_data: TrainingData, tiny_model: PlaceRecognitionModel, test_cfg: Configuration
    ):
        """Tests the `vprtk.ignite.validation_recall` function."""
        recalls = validation_recall(tiny_model, training_data, test_cfg.evaluation)
        assert set(recalls) == {1, 5}
        assert 0.0 <= recalls[1] <= recalls[5] <= 100.0
        reranked = validation_recall(tiny_model, training_data, test_cfg.evaluation, rerank=True)
        assert 0.0 <= reranked[1] <= reranked[5] <= 100.0

    def test_train_early_stopping(
        self, training_data: TrainingData, tiny_model: PlaceRecognitionModel, test_cfg: Configuration
    ):
        """Tests the `vprtk.ignite.train` function: no improvement for 3 epochs ends the run."""
        test_cfg.train.patience_epochs = 3
        test_cfg.train.max_epochs = 10
        snapshots = {}
        result = train(
            test_cfg,
            tiny_model,
            training_data,
            validation_fn=scripted_validation([50.0, 60.0, 60.0, 60.0, 60.0], snapshots),
        )
        assert list(result.history["epoch"]) == [1, 2, 3, 4, 5]
        assert result.best_epoch == 2
        assert result.best_r5 == 60.0
        for name, value in result.model.state_dict().items():
            assert torch.equal(value, snapshots[2][name])

    def test_train_freezes_backbone(
        self, training_data: TrainingData, tiny_model: PlaceRecognitionModel, test_cfg: Configuration
    ):
        before = deepcopy(tiny_model.state_dict())
        result = train(
            test_cfg, tiny_model, training_data, validation_fn=scripted_validation([10.0, 20.0])
        )
        assert result.triplets_seen > 0
        changed = set()
        for name, param in result.model.named_parameters():
            group = parameter_group(name)
            if group in test_cfg.train.freeze_policy:
                assert torch.equal(param.detach(), before[name])
            elif not torch.equal(param.detach(), before[name]):
                changed.add(group)
        assert "adapters" in changed

    def test_train_zero_learning_rate(
        self,
        training_data: TrainingData,
        tiny_model: PlaceRecognitionModel,
        test_cfg: Configuration,
        tmp_path,
    ):
        """Constant validation recall stops training after 1 + patience epochs."""
        test_cfg.train.learning_rate = 0.0
        test_cfg.train.patience_epochs = 2
        test_cfg.train.max_epochs = 6
        before = deepcopy(tiny_model.state_dict())
        result = train(test_cfg, tiny_model, training_data, output_dir=tmp_path)
        assert len(result.history) == 3
        assert result.history["val_r5"].nunique() == 1
        assert result.best_epoch == 1
        for name, value in result.model.state_dict().items():
            assert torch.equal(value, before[name])

        history = pd.read_csv(os.path.join(tmp_path, "history.csv"))
        assert list(history.columns) == HISTORY_COLUMNS
        np.testing.assert_allclose(history["val_r5"], result.history["val_r5"])

    def test_train_triplet_cap(
        self, training_data: TrainingData, tiny_model: PlaceRecognitionModel, test_cfg: Configuration
    ):
        test_cfg.train.max_triplets = 3
        test_cfg.train.max_epochs = 5
        result = train(
            test_cfg, tiny_model, training_data, validation_fn=scripted_validation([10.0] * 5)
        )
        assert result.triplets_seen == 4
        assert len(result.history) == 1

    def test_train_errors(
        self, training_data: TrainingData, tiny_model: PlaceRecognitionModel, test_cfg: Configuration
    ):
        empty = TrainingData(
            database_images=training_data.database_images,
            database_ids=training_data.database_ids,
            database_tags=training_data.database_tags,
            train_images=training_data.train_images[:0],
            train_tags=[],
            val_images=training_data.val_images,
            val_tags=training_data.val_tags,
        )
        with pytest.raises(ValueError):
            train(test_cfg, tiny_model, empty)

        test_cfg.mining.hard_negatives = 3
        with pytest.raises(ValueError):
            train(test_cfg, tiny_model, training_data)

        test_cfg.mining.hard_negatives = test_cfg.loss.hard_negatives_per_query
        test_cfg.train.freeze_policy = ["blocks"]
        with pytest.raises(ValueError):
            train(test_cfg, tiny_model, training_data)
