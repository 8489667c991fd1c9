"""
Geographic triplet mining with hard negatives chosen in the current global-feature space.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from vprtk.config import MiningConfiguration
from vprtk.index import geo_neighbors, pairwise_haversine_m
from vprtk.utils import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class Triplet:
    """
    ## Attributes:
    * `query` (`int`): Position of the training query.
    * `positive` (`int`): Database position of the positive.
    * `negatives` (`tuple`): Database positions of the hard negatives, hardest first.
    """

    query: int
    positive: int
    negatives: tuple


@dataclass
class MiningStats:
    mined: int = 0
    no_positive: int = 0
    too_few_negatives: int = 0

    @property
    def skipped(self) -> int:
        return self.no_positive + self.too_few_negatives

    def update(self, other: "MiningStats"):
        self.mined += other.mined
        self.no_positive += other.no_positive
        self.too_few_negatives += other.too_few_negatives


def query_rng(seed: int, epoch: int, query: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, query), so mining does not depend on batch order."""
    return np.random.default_rng([seed, epoch, query])


class TripletMiner:
    """
    Holds the geographic ground truth of training queries against the database.

    ## Args:
    * `query_latlon` (`np.ndarray`): `(n_q, 2)` training query coordinates in degrees.
    * `database_latlon` (`np.ndarray`): `(n_db, 2)` database coordinates in degrees.
    * `mining_cfg` (`MiningConfiguration`): Radii and pool sizes.
    """

    def __init__(
        self,
        query_latlon: np.ndarray,
        database_latlon: np.ndarray,
        mining_cfg: MiningConfiguration,
    ):
        if mining_cfg.positive_radius_m >= mining_cfg.negative_radius_m:
            raise ValueError("positive_radius_m must be smaller than negative_radius_m.")
        self.cfg = mining_cfg
        self.query_latlon = np.asarray(query_latlon, dtype=np.float64)
        self.database_latlon = np.asarray(database_latlon, dtype=np.float64)
        self.positives = geo_neighbors(
            self.query_latlon, self.database_latlon, mining_cfg.positive_radius_m
        )
        everything = np.arange(len(self.database_latlon))
        self.negatives = [
            np.setdiff1d(everything, near, assume_unique=True)
            for near in geo_neighbors(
                self.query_latlon, self.database_latlon, mining_cfg.negative_radius_m
            )
        ]

    def __len__(self) -> int:
        return len(self.query_latlon)

    def mine(
        self,
        query: int,
        query_global: np.ndarray,
        database_global: np.ndarray,
        rng: np.random.Generator,
        stats: MiningStats = None,
    ) -> Optional[Triplet]:
        """
        Picks the positive nearest to the query in feature space and the `hard_negatives` nearest among a
        random sample of `negative_pool` definite negatives. Feature ties go to the lowest database position.

        ## Returns:
        * `Triplet` or `None` when the query has no positive or too few definite negatives.
        """
        stats = MiningStats() if stats is None else stats
        positives = self.positives[query]
        if positives.size == 0:
            stats.no_positive += 1
            return None
        negatives = self.negatives[query]
        pool_size = self.cfg.negative_pool
        if negatives.size < max(pool_size, self.cfg.hard_negatives):
            stats.too_few_negatives += 1
            return None

        def feature_distance(positions: np.ndarray) -> np.ndarray:
            return np.linalg.norm(database_global[positions] - query_global, axis=1)

        positive = int(positives[np.argmin(feature_distance(positives))])
        pool = np.sort(rng.choice(negatives, size=pool_size, replace=False))
        hardest = np.argsort(feature_distance(pool), kind="stable")[: self.cfg.hard_negatives]
        stats.mined += 1
        return Triplet(query=query, positive=positive, negatives=tuple(int(n) for n in pool[hardest]))

    def mine_batch(
        self,
        queries: Sequence[int],
        query_global: np.ndarray,
        database_global: np.ndarray,
        seed: int,
        epoch: int,
    ) -> tuple:
        """
        Mines every query of a batch and checks the geometry of the result.

        ## Returns:
        * `tuple`: The mined `Triplet` list and the batch `MiningStats`.
        """
        stats = MiningStats()
        triplets = []
        for q in queries:
            triplet = self.mine(
                int(q), query_global[q], database_global, query_rng(seed, epoch, int(q)), stats
            )
            if triplet is not None:
                triplets.append(triplet)
        if stats.skipped:
            logger.warning(
                f"Skipped {stats.no_positive} queries without positives and "
                f"{stats.too_few_negatives} with fewer than {self.cfg.negative_pool} definite negatives."
            )
        self.check_geometry(triplets)
        return triplets, stats

    def check_geometry(self, triplets: List[Triplet]):
        """
        ## Raises:
        * `AssertionError`: If a positive lies beyond `positive_radius_m` or a negative within
          `negative_radius_m` of its query.
        """
        for t in triplets:
            distances = pairwise_haversine_m(
                self.query_latlon[[t.query]],
                self.database_latlon[[t.positive, *t.negatives]],
            )[0]
            if distances[0] > self.cfg.positive_radius_m:
                raise AssertionError(
                    f"Positive {t.positive} lies {distances[0]:.2f} m from query {t.query}."
                )
            if np.any(distances[1:] <= self.cfg.negative_radius_m):
                raise AssertionError(f"A negative of query {t.query} lies within the negative radius.")


def epoch_query_order(num_queries: int, epoch_queries: int, seed: int, epoch: int) -> np.ndarray:
    """
    The training queries visited in one epoch: seeded permutations, repeated when an epoch asks for more
    queries than exist.
    """
    if num_queries < 1:
        raise ValueError("The training set is empty.")
    if epoch_queries < 1:
        raise ValueError(f"epoch_queries must be positive, got {epoch_queries}.")
    rng = np.random.default_rng([seed, epoch])
    order: List[np.ndarray] = []
    remaining = epoch_queries
    while remaining > 0:
        perm = rng.permutation(num_queries)[:remaining]
        order.append(perm)
        remaining -= len(perm)
    return np.concatenate(order)
