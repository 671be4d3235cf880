import numpy as np
import pytest

from gradsense import metrics, synth
from gradsense.grid import GridConfig, make_grid, make_station_grid


def mean_stat(rows):
    return float(np.mean(rows if rows.ndim == 1 else rows[:, 0]))


class TestIidBootstrap:
    def test_constant_samples_zero_width(self):
        ci = metrics.bootstrap_iid(np.full(20, 4.2), mean_stat, 1000, seed=1)
        assert ci.lower == ci.upper == ci.point == pytest.approx(4.2)

    def test_contains_point_for_mean(self, rng):
        vals = rng.normal(size=40)
        ci = metrics.bootstrap_iid(vals, mean_stat, 2000, seed=2)
        assert ci.lower <= ci.point <= ci.upper

    def test_reproducible(self, rng):
        vals = rng.normal(size=25)
        a = metrics.bootstrap_iid(vals, mean_stat, 1000, seed=9)
        b = metrics.bootstrap_iid(vals, mean_stat, 1000, seed=9)
        assert (a.lower, a.upper) == (b.lower, b.upper)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            metrics.bootstrap_iid(np.ones(2), mean_stat, 1000)

    def test_minimum_resamples_enforced(self, rng):
        with pytest.raises(ValueError):
            metrics.bootstrap_iid(rng.normal(size=10), mean_stat, 500)


class TestStationBlocks:
    def test_partition_2x2(self):
        grid = make_grid(GridConfig(36, 50))
        st = make_station_grid(grid, 4)  # 9 x 13 station lattice
        blocks = metrics.station_blocks(st, 2)
        assert len(blocks) == 35  # ceil(9/2) * ceil(13/2)
        covered = np.concatenate(blocks)
        assert np.array_equal(np.sort(covered), np.arange(st.n_stations))
        assert max(len(b) for b in blocks) == 4

    def test_block_one_is_singletons(self, small_stations):
        blocks = metrics.station_blocks(small_stations, 1)
        assert all(len(b) == 1 for b in blocks)
        assert np.array_equal(np.concatenate(blocks), np.arange(small_stations.n_stations))


class TestBlockBootstrap:
    def test_block_one_identical_to_iid(self, rng, small_stations):
        vals = rng.normal(size=small_stations.n_stations)
        blocks = metrics.station_blocks(small_stations, 1)
        a = metrics.bootstrap_iid(vals, mean_stat, 1000, seed=7)
        b = metrics.bootstrap_block_spatial(vals, blocks, mean_stat, 1000, seed=7)
        assert (a.lower, a.upper) == (b.lower, b.upper)

    def test_partition_validation(self, rng, small_stations):
        vals = rng.normal(size=small_stations.n_stations)
        blocks = metrics.station_blocks(small_stations, 2)[:-1]  # drop one block
        with pytest.raises(ValueError):
            metrics.bootstrap_block_spatial(vals, blocks, mean_stat, 1000)

    def test_correlated_data_wider_block_ci(self):
        grid = make_grid(GridConfig(36, 50, variables=("a",)))
        st = make_station_grid(grid, 4)
        blocks = metrics.station_blocks(st, 2)
        wider = 0
        trials = 40
        draws = synth.sample_fields(3210, grid, trials, slope=-2.2)
        for i in range(trials):
            vals = draws[i, 0][st.lat_idx, st.lon_idx]
            ci_i = metrics.bootstrap_iid(vals, mean_stat, 1000, seed=100 + i)
            ci_b = metrics.bootstrap_block_spatial(vals, blocks, mean_stat, 1000,
                                                   seed=100 + i)
            wider += ci_b.width >= ci_i.width
        assert wider / trials >= 0.8

    def test_independent_data_similar_width(self, rng, small_stations):
        blocks = metrics.station_blocks(small_stations, 2)
        ratios = []
        for i in range(30):
            vals = rng.normal(size=small_stations.n_stations)
            ci_i = metrics.bootstrap_iid(vals, mean_stat, 2000, seed=i)
            ci_b = metrics.bootstrap_block_spatial(vals, blocks, mean_stat, 2000, seed=i)
            ratios.append(ci_b.width / ci_i.width)
        assert abs(np.mean(ratios) - 1.0) <= 0.15
