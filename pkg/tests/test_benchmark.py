"""
Tests for the `vprtk.benchmark` module.
"""
import math

import numpy as np
import pytest

from vprtk.benchmark import benchmark_rerank, loglog_slope
from vprtk.index import PlaceIndex, QueryFeatures


def _index(n: int, side: int, channels: int, seed: int = 0) -> PlaceIndex:
    rng = np.random.default_rng(seed)
    local = rng.normal(size=(n, side, side, channels))
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    return PlaceIndex(
        ids=np.arange(n),
        global_features=rng.normal(size=(n, 8)),
        local_grids=local,
        lat=np.zeros(n),
        lon=np.zeros(n),
    )


class TestBenchmark:
    def test_loglog_slope(self):
        """Tests the `vprtk.benchmark.loglog_slope` function."""
        x = np.array([1.0, 2.0, 4.0, 8.0])
        assert loglog_slope(x, 3.0 * x**2) == pytest.approx(2.0)

    def test_benchmark_table(self):
        """Tests the `vprtk.benchmark.benchmark_rerank` function."""
        index = _index(6, side=3, channels=4)
        queries = [QueryFeatures(index.global_features[0], index.local_grids[0])]
        result = benchmark_rerank(
            index, queries, k_values=(2, 4, 8), n_prime_values=(9, 16), repeats=1
        )
        assert list(result.table.columns) == ["sweep", "k", "n_prime", "seconds_per_query"]
        assert len(result.table) == 5
        assert (result.table.seconds_per_query > 0).all()
        assert list(result.table[result.table.sweep == "n_prime"].k) == [2, 2]
        assert math.isfinite(result.slope_k)

    def test_benchmark_errors(self):
        index = _index(2, side=2, channels=3)
        queries = [QueryFeatures(index.global_features[0], index.local_grids[0])]
        with pytest.raises(ValueError):
            benchmark_rerank(index, queries, k_values=(2,), n_prime_values=(10,), repeats=1)
        with pytest.raises(ValueError):
            benchmark_rerank(index, [], repeats=1)

    @pytest.mark.slow
    def test_rerank_scaling(self):
        """Re-rank time grows linearly in k and about quadratically in N'."""
        index = _index(32, side=15, channels=128)
        queries = [QueryFeatures(index.global_features[i], index.local_grids[i]) for i in range(3)]
        result = benchmark_rerank(
            index, queries, k_values=(16, 32, 64, 128), n_prime_values=(225, 961, 3721), repeats=3
        )
        assert 0.6 < result.slope_k < 1.4
        assert result.slope_n_prime > 1.4
