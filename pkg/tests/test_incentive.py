import numpy as np
import pytest

from gradsense import incentive


class TestSelect:
    def test_full_set_captures_everything(self, rng):
        u = rng.random(30)
        for strategy in incentive.STRATEGIES:
            res = incentive.select(strategy, 30, u, scores=rng.random(30),
                                   distances_km=rng.random(30) * 500 + 1, seed=3)
            assert res.captured == pytest.approx(1.0)

    def test_oracle_dominance_random_instances(self, rng):
        for _ in range(40):
            n = int(rng.integers(10, 60))
            u = rng.random(n)
            k = int(rng.integers(1, n))
            oracle = incentive.select("oracle", k, u)
            for strategy in ("ig", "distance", "uniform"):
                res = incentive.select(strategy, k, u, scores=rng.random(n),
                                       distances_km=rng.random(n) * 900 + 1,
                                       seed=int(rng.integers(1 << 30)))
                assert oracle.captured >= res.captured - 1e-12
            assert oracle.optimality_ratio == pytest.approx(1.0)

    def test_uniform_expectation(self, rng):
        u = rng.random(40)
        k = 8
        caps = [incentive.select("uniform", k, u, seed=s).captured for s in range(400)]
        se = np.std(caps) / np.sqrt(len(caps))
        assert abs(np.mean(caps) - k / 40) <= 2.5 * se

    def test_tie_break_lower_id(self):
        u = np.ones(6)
        res = incentive.select("ig", 3, u, scores=np.ones(6))
        assert res.selected == (0, 1, 2)

    def test_distance_singularity_guard(self):
        u = np.ones(4)
        d = np.array([0.0, 10.0, 20.0, 40.0])
        scores = incentive.distance_scores(d)
        assert scores[0] == scores[1:].max()
        res = incentive.select("distance", 2, u, distances_km=d)
        assert 0 in res.selected and 1 in res.selected

    def test_errors(self, rng):
        u = rng.random(10)
        with pytest.raises(ValueError):
            incentive.select("ig", 11, u, scores=rng.random(10))
        with pytest.raises(ValueError):
            incentive.select("ig", 3, u)  # missing scores
        with pytest.raises(ValueError):
            incentive.select("uniform", 3, u)  # missing seed
        with pytest.raises(ValueError):
            incentive.select("nope", 3, u)


class TestCapturedUtility:
    def test_empty_and_full(self, rng):
        u = rng.random(12)
        assert incentive.captured_utility([], u) == 0.0
        assert incentive.captured_utility(range(12), u) == pytest.approx(1.0)

    def test_naive_oracle(self, rng):
        for _ in range(30):
            u = rng.normal(size=25)
            sel = rng.choice(25, size=int(rng.integers(1, 20)), replace=False)
            expected = sum(abs(u[g]) for g in sel) / sum(abs(x) for x in u)
            assert incentive.captured_utility(sel, u) == pytest.approx(expected, rel=1e-12)

    def test_zero_total_flagged(self):
        with pytest.raises(ValueError):
            incentive.captured_utility([0], np.zeros(5))

    def test_disjoint_additivity(self, rng):
        u = rng.random(40)
        s = set(rng.choice(40, size=10, replace=False).tolist())
        t = set(rng.choice(sorted(set(range(40)) - s), size=10, replace=False).tolist())
        lhs = incentive.captured_utility(s | t, u)
        rhs = incentive.captured_utility(s, u) + incentive.captured_utility(t, u)
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestPayment:
    def test_symmetric_split(self):
        alloc = incentive.payment([1.0, 1.0], 10000.0)
        assert alloc.amounts.tolist() == [5000.0, 5000.0]

    def test_single_mass(self):
        alloc = incentive.payment([0.0, 3.0, 0.0], 777.0)
        assert alloc.amounts[1] == pytest.approx(777.0)

    def test_budget_balance_random(self, rng):
        scores = rng.random(117)
        alloc = incentive.payment(scores, 10000.0)
        assert abs(alloc.amounts.sum() - 10000.0) <= 1e-9 * 10000.0
        naive = [s / scores.sum() * 10000.0 for s in scores]
        assert np.allclose(alloc.amounts, naive, rtol=1e-12)
        assert np.all(alloc.amounts >= 0.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            incentive.payment([-1.0, 2.0], 100.0)
        with pytest.raises(ValueError):
            incentive.payment([0.0, 0.0], 100.0)


class TestOverpayment:
    def test_identical_shares(self, rng):
        p = rng.random(20)
        p /= p.sum()
        total, per = incentive.overpayment(p, p)
        assert total == 0.0 and np.all(per == 0.0)

    def test_one_hot_on_zero_station(self):
        p_true = np.array([0.0, 0.4, 0.6])
        p_proxy = np.array([1.0, 0.0, 0.0])
        total, _ = incentive.overpayment(p_proxy, p_true)
        assert total == pytest.approx(1.0 - p_true[0])

    def test_balance_identity(self, rng):
        for _ in range(25):
            a = rng.random(15); a /= a.sum()
            b = rng.random(15); b /= b.sum()
            over, _ = incentive.overpayment(a, b)
            under, _ = incentive.overpayment(b, a)
            assert over == pytest.approx(under, abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            incentive.overpayment([0.5, 0.2], [0.5, 0.5])


class TestDecileCalibration:
    def test_self_calibration(self, rng):
        u = rng.random(117) + 0.01
        rep = incentive.decile_calibration(u, u)
        assert np.all(np.diff(rep.decile_mean_utility) >= -1e-12)
        assert rep.gini_ratio == pytest.approx(1.0, abs=1e-9)
        assert rep.overpayment_total <= 1e-12

    def test_constant_proxy(self, rng):
        u = rng.random(50) + 0.01
        rep = incentive.decile_calibration(np.ones(50), u)
        assert rep.gini_ratio == pytest.approx(0.0, abs=1e-12)

    def test_bins_match_naive_partition(self, rng):
        n = 117
        proxy = rng.random(n)
        u = rng.random(n)
        rep = incentive.decile_calibration(proxy, u)
        order = sorted(range(n), key=lambda i: (proxy[i], i))
        base, rem = divmod(n, 10)
        start = 0
        for b in range(10):
            size = base + 1 if b < rem else base
            members = order[start:start + size]
            start += size
            assert rep.decile_mean_utility[b] == pytest.approx(
                np.mean([abs(u[i]) for i in members]), rel=1e-12)

    def test_too_few_stations(self, rng):
        with pytest.raises(ValueError):
            incentive.decile_calibration(rng.random(5), rng.random(5))


class TestPaymentStability:
    def test_constant_scores_zero_width(self):
        m = np.tile(np.array([1.0, 2.0, 3.0]), (12, 1))
        res = incentive.payment_stability(m, n_resamples=1000, seed=5)
        assert np.allclose(res.lower, res.upper)
        assert res.ci_to_share == pytest.approx(0.0, abs=1e-12)

    def test_shares_valid(self, rng):
        m = rng.random((20, 30))
        res = incentive.payment_stability(m, n_resamples=1000, seed=6)
        assert res.shares.sum() == pytest.approx(1.0, rel=1e-9)
        assert np.all(res.lower >= -1e-12) and np.all(res.upper <= 1.0 + 1e-12)

    def test_ratio_shrinks_with_more_timestamps(self, rng):
        base = rng.random(25) + 0.5
        noise = rng.normal(size=(80, 25)) * 0.2
        scores = np.abs(base[None, :] + noise)
        r_small = incentive.payment_stability(scores[:40], n_resamples=2000,
                                              top_k=10, seed=8).ci_to_share
        r_big = incentive.payment_stability(scores, n_resamples=2000,
                                            top_k=10, seed=8).ci_to_share
        assert r_big < r_small
        assert r_big / r_small == pytest.approx(1 / np.sqrt(2), abs=0.2 / np.sqrt(2))

    def test_too_few_timestamps(self, rng):
        with pytest.raises(ValueError):
            incentive.payment_stability(rng.random((5, 10)))


class TestShrinkage:
    def _shares(self, rng, n=20):
        p = rng.random(n) + 0.05
        return p / p.sum()

    def test_perfect_distance_prior(self, rng):
        truth = self._shares(rng)
        proxy = np.stack([self._shares(rng) for _ in range(8)])
        fit = incentive.shrinkage_fit(proxy, truth, truth, objective="mse")
        assert fit.lam <= 0.05

    def test_perfect_proxy(self, rng):
        truth = self._shares(rng)
        proxy = np.tile(truth, (8, 1))
        dist = self._shares(rng)
        fit = incentive.shrinkage_fit(proxy, dist, truth, objective="mse")
        assert fit.lam >= 0.95

    def test_planted_mixture(self, rng):
        lams = []
        for _ in range(20):
            n = 40
            proxy_mean = self._shares(rng, n)
            dist = self._shares(rng, n)
            torig = 0.5 * proxy_mean + 0.5 * dist
            proxy = np.stack([np.abs(proxy_mean + rng.normal(size=n) * 0.004)
                              for _ in range(10)])
            proxy /= proxy.sum(axis=1, keepdims=True)
            truth = np.abs(torig + rng.normal(size=n) * 0.002)
            fit = incentive.shrinkage_fit(proxy, dist, truth, objective="mse")
            lams.append(fit.lam)
        assert 0.3 <= np.mean(lams) <= 0.7

    def test_captured_utility_objective(self, rng):
        truth = self._shares(rng, 30)
        proxy = np.stack([self._shares(rng, 30) for _ in range(6)])
        dist = self._shares(rng, 30)
        fit = incentive.shrinkage_fit(proxy, dist, truth, objective="captured_utility", k=5)
        assert 0.0 <= fit.lam <= 1.0
        assert fit.per_fold.shape == (6,)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            incentive.shrinkage_fit(rng.random((2, 5)), np.full(5, 0.2), rng.random(5))
        with pytest.raises(ValueError):
            incentive.shrinkage_fit(np.full((4, 5), 0.2), np.full(5, 0.2),
                                    rng.random(5), objective="nope")
