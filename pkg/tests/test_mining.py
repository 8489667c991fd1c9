"""
Tests for the `vprtk.mining` module.
"""
import numpy as np
import pytest

from vprtk.config import MiningConfiguration
from vprtk.mining import Triplet, TripletMiner, epoch_query_order

# metres per degree of longitude on the equator
METRES_PER_DEGREE = 111_194.93


def _along_equator(metres) -> np.ndarray:
    metres = np.atleast_1d(np.asarray(metres, dtype=np.float64))
    return np.stack([np.zeros_like(metres), metres / METRES_PER_DEGREE], axis=1)


@pytest.fixture
def mining_cfg() -> MiningConfiguration:
    return MiningConfiguration(
        positive_radius_m=10.0, negative_radius_m=25.0, negative_pool=4, hard_negatives=2
    )


@pytest.fixture
def miner(mining_cfg: MiningConfiguration) -> TripletMiner:
    # positions 0 and 1 are potential positives, 2 is neither, 3.. are definite negatives
    database = [5.0, 8.0, 15.0] + [100.0 + 10.0 * i for i in range(10)]
    queries = [0.0, 5000.0]
    return TripletMiner(_along_equator(queries), _along_equator(database), mining_cfg)


class TestMining:
    def test_ground_truth(self, miner: TripletMiner):
        """Tests the `vprtk.mining.TripletMiner` geographic ground truth."""
        np.testing.assert_array_equal(miner.positives[0], [0, 1])
        np.testing.assert_array_equal(miner.negatives[0], np.arange(3, 13))
        assert miner.positives[1].size == 0
        assert len(miner) == 2

    def test_positive_is_feature_nearest(self, miner: TripletMiner):
        """Tests the `vprtk.mining.TripletMiner.mine` function."""
        database_global = np.zeros((13, 2))
        database_global[0] = [1.0, 0.0]
        database_global[1] = [0.1, 0.0]
        triplet = miner.mine(0, np.zeros(2), database_global, np.random.default_rng(0))
        assert triplet.positive == 1

    def test_ties_go_to_lowest_position(self, miner: TripletMiner):
        database_global = np.ones((13, 2))
        triplet = miner.mine(0, np.zeros(2), database_global, np.random.default_rng(0))
        assert triplet.positive == 0
        # equally hard negatives keep ascending database order
        assert list(triplet.negatives) == sorted(triplet.negatives)
        assert len(triplet.negatives) == 2

    def test_hard_negatives_are_hardest_in_pool(self, miner: TripletMiner):
        database_global = np.zeros((13, 2))
        database_global[3:, 0] = np.arange(10, 0, -1)
        triplet = miner.mine(0, np.zeros(2), database_global, np.random.default_rng(3))
        distances = database_global[list(triplet.negatives), 0]
        assert list(distances) == sorted(distances)
        assert all(3 <= n < 13 for n in triplet.negatives)

    def test_mine_skips(self, miner: TripletMiner, mining_cfg: MiningConfiguration):
        database_global = np.zeros((13, 2))
        batch, stats = miner.mine_batch([0, 1], np.zeros((2, 2)), database_global, seed=0, epoch=0)
        assert len(batch) == 1
        assert stats.mined == 1
        assert stats.no_positive == 1

        mining_cfg.negative_pool = 20
        starved = TripletMiner(miner.query_latlon, miner.database_latlon, mining_cfg)
        batch, stats = starved.mine_batch([0], np.zeros((2, 2)), database_global, seed=0, epoch=0)
        assert batch == []
        assert stats.too_few_negatives == 1

    def test_mine_batch_deterministic(self, miner: TripletMiner):
        """Tests the `vprtk.mining.TripletMiner.mine_batch` function."""
        rng = np.random.default_rng(0)
        database_global = rng.normal(size=(13, 4))
        query_global = rng.normal(size=(2, 4))
        first, _ = miner.mine_batch([0], query_global, database_global, seed=5, epoch=2)
        second, _ = miner.mine_batch([1, 0], query_global, database_global, seed=5, epoch=2)
        assert first == second

    def test_check_geometry(self, miner: TripletMiner):
        miner.check_geometry([Triplet(query=0, positive=1, negatives=(3, 4))])
        with pytest.raises(AssertionError):
            miner.check_geometry([Triplet(query=0, positive=3, negatives=(4,))])
        with pytest.raises(AssertionError):
            miner.check_geometry([Triplet(query=0, positive=0, negatives=(2,))])

    def test_radii_must_be_ordered(self):
        cfg = MiningConfiguration(positive_radius_m=30.0, negative_radius_m=25.0)
        with pytest.raises(ValueError):
            TripletMiner(_along_equator([0.0]), _along_equator([1.0]), cfg)

    def test_epoch_query_order(self):
        """Tests the `vprtk.mining.epoch_query_order` function."""
        order = epoch_query_order(5, 12, seed=0, epoch=0)
        assert len(order) == 12
        assert sorted(order[:5]) == list(range(5))
        assert sorted(order[5:10]) == list(range(5))
        np.testing.assert_array_equal(order, epoch_query_order(5, 12, seed=0, epoch=0))
        assert len(epoch_query_order(5, 3, seed=0, epoch=1)) == 3
        with pytest.raises(ValueError):
            epoch_query_order(0, 3, seed=0, epoch=0)
        with pytest.raises(ValueError):
            epoch_query_order(5, 0, seed=0, epoch=0)
