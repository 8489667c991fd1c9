# imports
import logging

import numpy as np
import pytest
import torch
from rich.logging import RichHandler

# vprtk
from vprtk import utils

logger = utils.get_logger("test_logger")


class TestUtilities:
    def test_get_logger(self):
        """Test the `vprtk.utils.get_logger` function."""
        first = utils.get_logger("vprtk.tests.logger", level=logging.DEBUG)
        second = utils.get_logger("vprtk.tests.logger", level=logging.DEBUG)
        assert first is second
        assert sum(isinstance(h, RichHandler) for h in first.handlers) == 1
        assert first.propagate == False

    def test_resolve_dtype(self):
        """Test the `vprtk.utils.resolve_dtype` function."""
        assert utils.resolve_dtype("f32") == torch.float32
        assert utils.resolve_dtype("f64") == torch.float64
        with pytest.raises(ValueError):
            utils.resolve_dtype("f16")

    def test_set_determinism(self):
        """Test the `vprtk.utils.set_determinism` function."""
        utils.set_determinism(7, use_deterministic_algorithms=False)
        a = (np.random.rand(), torch.rand(1).item())
        utils.set_determinism(7, use_deterministic_algorithms=False)
        b = (np.random.rand(), torch.rand(1).item())
        assert a == b

    def test_hydra_instantiate(self):
        """Test the `vprtk.utils.hydra_instantiate` function."""
        param = torch.nn.Parameter(torch.zeros(2))
        optimizer = utils.hydra_instantiate(
            {"_target_": "torch.optim.Adam", "lr": 0.1}, params=[param]
        )
        assert isinstance(optimizer, torch.optim.Adam)
