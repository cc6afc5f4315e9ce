import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from distsi.errors import InvalidInputError
from distsi.glm import GAUSSIAN, Dataset, FamilySpec
from distsi.lasso import PenaltySpec
from distsi.multisplit import (
    MultisplitConfig,
    aggregate_pvalues,
    dor,
    pvalue_matrix,
    quantile_aggregate,
    run_multisplit,
    run_replicate,
    splitting_replicate,
)

from _oracles import ar1_design

unit = st.floats(0.0, 1.0, allow_nan=False)


def _grid_oracle(col, gamma_min, points=20001):
    """Infimum of Q(gamma) over a dense grid in (gamma_min, 1), straight from the definition."""
    pv = np.sort(col)
    B = pv.size
    best = np.inf
    grid = np.union1d(np.linspace(gamma_min, 1.0, points)[1:-1], np.arange(1, B) / B)
    for g in grid[grid > gamma_min]:
        k = math.ceil(g * B)
        best = min(best, min(1.0, pv[k - 1] / g))
    # Q(g) -> p_(B) as g -> 1 from below
    best = min(best, min(1.0, pv[-1]))
    return min(1.0, (1 - math.log(gamma_min)) * best)


class TestAggregation:
    def test_identical_values(self):
        P = np.full((5, 1), 0.01)
        assert aggregate_pvalues(P, 0.05)[0] == pytest.approx((1 - math.log(0.05)) * 0.01, abs=1e-12)
        assert aggregate_pvalues(P, 0.05)[0] == pytest.approx(0.039957, abs=1e-6)

    def test_all_ones(self):
        assert aggregate_pvalues(np.ones((5, 3)), 0.05).tolist() == [1.0, 1.0, 1.0]

    def test_median_example(self):
        assert quantile_aggregate([0.01, 1, 1, 1, 1], 0.5) == 1.0

    def test_quantile_is_order_statistic(self):
        pv = [0.5, 0.1, 0.3, 0.2, 0.4]
        assert quantile_aggregate(pv, 0.4) == pytest.approx(0.2 / 0.4)
        assert quantile_aggregate(pv, 0.41) == pytest.approx(0.3 / 0.41)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (5, 2), elements=unit), st.sampled_from([0.05, 0.1, 0.3]))
    def test_matches_dense_grid(self, P, gamma_min):
        got = aggregate_pvalues(P, gamma_min)
        for j in range(P.shape[1]):
            assert got[j] == pytest.approx(_grid_oracle(P[:, j], gamma_min), abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=unit), st.integers(0, 5), st.integers(0, 2), unit)
    def test_monotone_and_bounded(self, P, b, j, bump):
        base = aggregate_pvalues(P, 0.05)
        assert np.all(base >= P.min(axis=0) - 1e-15) and np.all(base <= 1.0)
        Q = P.copy()
        Q[b, j] = max(Q[b, j], bump)
        assert np.all(aggregate_pvalues(Q, 0.05) >= base - 1e-15)

    def test_gamma_min_range(self):
        with pytest.raises(InvalidInputError):
            aggregate_pvalues(np.ones((2, 2)), 1.0)


class TestDOR:
    def test_plain(self):
        truth = np.r_[np.ones(15, bool), np.zeros(185, bool)]
        pred = np.r_[np.ones(10, bool), np.zeros(5, bool), np.ones(5, bool), np.zeros(180, bool)]
        assert dor(pred, truth) == pytest.approx(72.0)

    def test_zero_cell_correction(self):
        truth = np.r_[np.ones(10, bool), np.zeros(190, bool)]
        assert dor(truth.copy(), truth) == pytest.approx(8001.0)

    def test_random_predictions_near_one(self):
        rng = np.random.default_rng(0)
        vals = [dor(rng.random(400) < 0.5, rng.random(400) < 0.3) for _ in range(300)]
        assert abs(np.median(np.log(vals))) < 0.15


class TestReplicates:
    def _data(self, seed, n=120, p=15, signal=True):
        rng = np.random.default_rng(seed)
        X = ar1_design(rng, n, p, 0.3)
        beta = np.zeros(p)
        if signal:
            beta[[0, 4]] = [1.0, -1.0]
        return Dataset(X, X @ beta + rng.normal(size=n))

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            MultisplitConfig(B=0)
        with pytest.raises(InvalidInputError):
            MultisplitConfig().subset_size(1)
        assert MultisplitConfig().subset_size(101) == 50

    def test_dominating_penalty_gives_ones(self):
        data = self._data(1)
        pv = run_replicate(data, MultisplitConfig(), GAUSSIAN, PenaltySpec.uniform(1e6, data.p))
        assert np.all(pv == 1.0)

    def test_deterministic(self):
        data = self._data(2)
        cfg = MultisplitConfig(seed=9, K=2)
        pen = PenaltySpec.uniform(1.5, data.p)
        np.testing.assert_array_equal(run_replicate(data, cfg, GAUSSIAN, pen, 3),
                                      run_replicate(data, cfg, GAUSSIAN, pen, 3))
        a, ra = run_multisplit(data, cfg, GAUSSIAN, pen)
        b, rb = run_multisplit(data, cfg, GAUSSIAN, pen)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("method", ["dist-si", "splitting"])
    def test_matrix_entries(self, method):
        data = self._data(3)
        P = pvalue_matrix(data, MultisplitConfig(B=4), GAUSSIAN, PenaltySpec.uniform(1.5, data.p), method)
        assert P.shape == (4, data.p)
        assert np.all((P >= 0) & (P <= 1))

    def test_signals_detected(self):
        data = self._data(4, n=300)
        agg, rej = run_multisplit(data, MultisplitConfig(B=5), GAUSSIAN, PenaltySpec.uniform(1.5, data.p))
        assert rej[0] and rej[4]

    def test_null_per_replicate_validity(self):
        fam = FamilySpec("gaussian", 1.0, "estimate")
        hits, total = 0, 0
        for seed in range(200):
            data = self._data(100 + seed, n=100, p=10, signal=False)
            pv = run_replicate(data, MultisplitConfig(seed=seed), fam, PenaltySpec.uniform(0.8, data.p))
            hits += int(np.sum(pv < 0.1))
            total += data.p
        assert hits / total <= 0.12

    def test_splitting_uses_remainder_only(self):
        data = self._data(5)
        pv = splitting_replicate(data, MultisplitConfig(), GAUSSIAN, PenaltySpec.uniform(1.5, data.p))
        assert pv.shape == (data.p,)
