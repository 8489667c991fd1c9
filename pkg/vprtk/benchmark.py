"""
Wall-clock cost of re-ranking as a function of the candidate count `k` and the local grid size `N'`.
"""
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import torch

from vprtk.index import PlaceIndex, QueryFeatures, global_search
from vprtk.matching import rerank_candidates
from vprtk.tensor import l2_normalize
from vprtk.utils import get_logger

logger = get_logger(__name__)


@dataclass
class BenchmarkResult:
    """
    ## Attributes:
    * `table` (`pd.DataFrame`): One row per measurement: `sweep, k, n_prime, seconds_per_query`.
    * `slope_k` (`float`): Log-log slope of time against `k`.
    * `slope_n_prime` (`float`): Log-log slope of time against `N'`.
    """

    table: pd.DataFrame
    slope_k: float
    slope_n_prime: float


def time_rerank(
    query_grid: torch.Tensor, candidates: Sequence[torch.Tensor], repeats: int = 3
) -> float:
    """Best-of-`repeats` seconds to re-rank `candidates` for one query."""
    distances = np.arange(len(candidates), dtype=np.float64)
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        rerank_candidates(query_grid, candidates, distances)
        best = min(best, time.perf_counter() - start)
    return best


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def random_grid(side: int, channels: int, generator: torch.Generator) -> torch.Tensor:
    grid = torch.randn(side, side, channels, generator=generator, dtype=torch.float32)
    return l2_normalize(grid)


def benchmark_rerank(
    index: PlaceIndex,
    queries: Sequence[QueryFeatures],
    k_values: Sequence[int] = (10, 25, 50, 100),
    n_prime_values: Sequence[int] = (64, 225, 841),
    repeats: int = 3,
    seed: int = 0,
) -> BenchmarkResult:
    """
    Measures per-query re-rank time.

    The `k` sweep re-ranks the index's own local grids (candidates repeat when `k` exceeds the index).
    The `N'` sweep re-ranks `min(k_values)` random unit grids of side `sqrt(N')` with the index's local
    channel count.

    ## Args:
    * `index` (`PlaceIndex`): A built index.
    * `queries` (`Sequence[QueryFeatures]`): Queries timed in the `k` sweep.
    * `k_values` (`Sequence[int]`, optional): Candidate counts. Defaults to `(10, 25, 50, 100)`.
    * `n_prime_values` (`Sequence[int]`, optional): Perfect-square grid sizes. Defaults to `(64, 225, 841)`.
    * `repeats` (`int`, optional): Timing repeats, the fastest is kept. Defaults to `3`.
    * `seed` (`int`, optional): Seed of the random grids. Defaults to `0`.
    """
    if len(index) == 0 or not queries:
        raise ValueError("Benchmarking needs a non-empty index and at least one query.")
    logger.info("Benchmarking re-ranking...")
    rows = []
    n_prime = int(np.prod(index.local_shape[:2]))
    for k in k_values:
        per_query = []
        for query in queries:
            found = global_search(index, query.global_feature, len(index))
            positions = np.resize(found.positions, k)
            candidates = [torch.tensor(index.local_grids[p]) for p in positions]
            query_grid = torch.tensor(np.asarray(query.local_grid, dtype=np.float32))
            per_query.append(time_rerank(query_grid, candidates, repeats))
        rows.append(
            {"sweep": "k", "k": k, "n_prime": n_prime, "seconds_per_query": float(np.mean(per_query))}
        )

    generator = torch.Generator().manual_seed(seed)
    channels = index.local_shape[-1]
    k_fixed = min(k_values)
    for n in n_prime_values:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"N'={n} is not a perfect square.")
        query_grid = random_grid(side, channels, generator)
        candidates = [random_grid(side, channels, generator) for _ in range(k_fixed)]
        rows.append(
            {
                "sweep": "n_prime",
                "k": k_fixed,
                "n_prime": n,
                "seconds_per_query": time_rerank(query_grid, candidates, repeats),
            }
        )

    table = pd.DataFrame(rows, columns=["sweep", "k", "n_prime", "seconds_per_query"])
    by_k = table[table.sweep == "k"]
    by_n = table[table.sweep == "n_prime"]
    result = BenchmarkResult(
        table=table,
        slope_k=loglog_slope(by_k.k, by_k.seconds_per_query) if len(by_k) > 1 else float("nan"),
        slope_n_prime=(
            loglog_slope(by_n.n_prime, by_n.seconds_per_query) if len(by_n) > 1 else float("nan")
        ),
    )
    logger.info(
        f"Re-rank time slopes: {result.slope_k:.2f} in k, {result.slope_n_prime:.2f} in N'."
    )
    return result
