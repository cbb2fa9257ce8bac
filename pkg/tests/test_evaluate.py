import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from spenc.data import CountMatrix, gen_linear_factor
from spenc.evaluate import (
    DegenerateStrataError,
    EmptySupportWarning,
    assign_strata,
    feature_partition,
    invert_rule,
    pointwise_loglik,
    stratify,
    waic,
    waic_from_loglik,
    waic_overlap,
)
from spenc.inference import ConvergenceWarning, TrainConfig, fit
from spenc.model import LinkPair, ModelConfig, encode


def stub_fit(alpha, eta, kind="identity", gate=None):
    alpha = np.asarray(alpha, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return SimpleNamespace(
        alpha_mean=alpha, eta=eta, link=LinkPair(kind, eta), n_factors=alpha.shape[1],
        gate_mean=np.asarray(gate if gate is not None else np.full(alpha.shape[0], 0.5)),
    )


def brute_force_waic(ll):
    S, n = ll.shape
    lppd = 0.0
    pw = 0.0
    for i in range(n):
        lppd += math.log(sum(math.exp(v) for v in ll[:, i]) / S)
        m = sum(ll[:, i]) / S
        pw += sum((v - m) ** 2 for v in ll[:, i]) / (S - 1)
    return lppd, pw, -2 * (lppd - pw)


@pytest.fixture(scope="module")
def small_fit():
    Y, _ = gen_linear_factor(120, 6, seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return Y, fit(Y, ModelConfig(n_factors=2), TrainConfig(epochs=4, batch_size=60, summary_draws=10))


class TestWaic:
    def test_identical_draws(self):
        y = np.array([0, 1, 3, 2])
        ll1 = poisson.logpmf(y, 1.3)
        r = waic_from_loglik(np.tile(ll1, (5, 1)))
        assert r.p_waic == 0.0
        assert r.waic == pytest.approx(-2 * ll1.sum(), rel=1e-13)
        assert r.lppd == pytest.approx(ll1.sum(), rel=1e-13)

    def test_brute_force_oracle(self):
        ll = np.random.default_rng(0).normal(-1.5, 0.4, size=(7, 5))
        lppd, pw, w = brute_force_waic(ll)
        r = waic_from_loglik(ll)
        assert r.lppd == pytest.approx(lppd, rel=1e-12)
        assert r.p_waic == pytest.approx(pw, rel=1e-12)
        assert r.waic == pytest.approx(w, rel=1e-12)

    def test_se_definition(self):
        ll = np.random.default_rng(1).normal(-1.5, 0.4, size=(6, 9))
        r = waic_from_loglik(ll)
        point = -2 * (np.log(np.exp(ll).mean(axis=0)) - ll.var(axis=0, ddof=1))
        assert r.se == pytest.approx(math.sqrt(9) * point.std(ddof=1), rel=1e-12)

    def test_poisson_one_series_oracle(self):
        # E[log p(y | 1)] for y ~ Poisson(1), summed as a series
        series = sum(math.exp(-1) / math.factorial(y) * (-1 - math.lgamma(y + 1)) for y in range(40))
        # the commonly quoted -1.3044 is this value rounded loosely; the series gives -1.30484
        assert series == pytest.approx(-1.30484224, abs=1e-8)
        assert series == pytest.approx(-1.3044, abs=1e-3)
        y = np.random.default_rng(2).poisson(1.0, size=200_000)
        r = waic_from_loglik(np.tile(poisson.logpmf(y, 1.0), (2, 1)))
        se = poisson.logpmf(y, 1.0).std() / math.sqrt(y.size)
        assert abs(r.lppd / y.size - series) < 5 * se

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            waic_from_loglik(np.zeros((1, 3)))

    def test_mismatched_extra_dimension_increases(self):
        rng = np.random.default_rng(3)
        y1 = rng.poisson(2.0, 50)
        y2 = rng.poisson(2.0, 50)
        rates = np.array([1.8, 2.0, 2.2])
        ll1 = poisson.logpmf(y1[None, :], rates[:, None])
        ll2 = poisson.logpmf(y2[None, :], 6.0 * rates[:, None])  # mismatched model for the new item
        both = np.concatenate([ll1, ll2], axis=1)
        assert waic_from_loglik(both).waic > waic_from_loglik(ll1).waic
        assert waic_from_loglik(both).waic == pytest.approx(brute_force_waic(both)[2], rel=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        ll = rng.normal(-2, 0.5, size=(4, 6))
        r = waic_from_loglik(ll)
        p = waic_from_loglik(ll[rng.permutation(4)][:, rng.permutation(6)])
        assert p.waic == pytest.approx(r.waic, rel=1e-12)
        assert p.se == pytest.approx(r.se, rel=1e-9)
        assert r.p_waic >= 0 and r.se >= 0

    def test_streaming_matches_matrix(self, small_fit):
        Y, f = small_fit
        yd = Y.toarray().astype(float)
        ll = np.stack([pointwise_loglik(f, d, yd, 1.0).ravel() for d in f.draws(6)])
        r = waic(f, Y, S=6)
        ref = waic_from_loglik(ll)
        assert r.waic == pytest.approx(ref.waic, rel=1e-10)
        assert r.p_waic == pytest.approx(ref.p_waic, rel=1e-8)
        assert r.n_points == Y.n_rows * Y.n_cols

    def test_user_row_unit(self, small_fit):
        Y, f = small_fit
        yd = Y.toarray().astype(float)
        ll = np.stack([pointwise_loglik(f, d, yd, 1.0).sum(axis=1) for d in f.draws(5)])
        r = waic(f, Y, S=5, unit="user-row")
        assert r.n_points == Y.n_rows
        assert r.waic == pytest.approx(waic_from_loglik(ll).waic, rel=1e-10)

    def test_errors(self, small_fit):
        Y, f = small_fit
        with pytest.raises(ValueError):
            waic(f, Y, S=1)
        with pytest.raises(ValueError):
            waic(f, Y, S=3, unit="cell")
        with pytest.raises(ValueError, match="expected 6"):
            waic(f, CountMatrix.from_dense(np.zeros((2, 5), dtype=int)), S=3)

    def test_overlap(self):
        a = waic_from_loglik(np.random.default_rng(0).normal(-1, 0.1, (3, 40)))
        assert waic_overlap(a, a)
        json_doc = a.to_json()
        assert set(json_doc) == {"waic", "se", "lppd", "p_waic", "unit", "n_points", "n_draws"}


class TestPartition:
    def test_boundaries(self):
        f = stub_fit(np.ones((3, 1)), np.ones(3), gate=[1.0, 0.5, 0.0])
        p = feature_partition(f, 0.5)
        assert p.factor_items == [0] and p.background_items == [1, 2]
        assert feature_partition(f, 0.99).factor_items == [0]

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            feature_partition(stub_fit(np.ones((2, 1)), np.ones(2)), 1.0)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.01, 0.99))
    @settings(max_examples=80, deadline=None)
    def test_disjoint_and_exhaustive(self, gates, thr):
        f = stub_fit(np.ones((len(gates), 1)), np.ones(len(gates)), gate=gates)
        p = feature_partition(f, thr)
        assert not set(p.factor_items) & set(p.background_items)
        assert sorted(p.factor_items + p.background_items) == list(range(len(gates)))


class TestRules:
    def test_scaled_interval(self):
        f = stub_fit([[0.5], [0.2]], [1.0, 2.0])
        assert invert_rule(f, 0, (1, 3), xi_u=1.0).scaled_interval == (1.0, 3.0)
        assert invert_rule(f, 0, (1, 3), xi_u=2.0).scaled_interval == (0.5, 1.5)

    def test_support_threshold(self):
        f = stub_fit([[1.0], [0.005], [0.02], [0.0]], np.ones(4))
        assert invert_rule(f, 0, (0, 1)).items == [0, 2]
        assert invert_rule(f, 0, (0, 1), support_threshold=0).items == [0, 1, 2]

    def test_empty_support_warns(self):
        f = stub_fit(np.zeros((3, 1)), np.ones(3))
        with pytest.warns(EmptySupportWarning):
            r = invert_rule(f, 0, (0, 1))
        assert r.support == [] and r.warning
        assert not r.contains([5, 5, 5])

    def test_bad_interval(self):
        f = stub_fit(np.ones((2, 1)), np.ones(2))
        with pytest.raises(ValueError):
            invert_rule(f, 0, (2, 1))
        with pytest.raises(ValueError):
            invert_rule(f, 0, (0, 1), xi_u=0)
        with pytest.raises(ValueError):
            invert_rule(f, 1, (0, 1))

    def test_weighted_sum_value(self):
        f = stub_fit([[0.5], [0.25]], [2.0, 1.0])
        r = invert_rule(f, 0, (0, 10))
        # 4/2 * 0.5 + 3/1 * 0.25
        assert r.weighted_sum([4, 3]) == pytest.approx(1.75, abs=1e-15)

    @given(st.integers(0, 10_000), st.sampled_from(["identity", "log"]), st.floats(0.2, 5))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_exact(self, seed, kind, xi):
        rng = np.random.default_rng(seed)
        I, K = 7, 3
        alpha = rng.exponential(size=(I, K)) * (rng.uniform(size=(I, K)) > 0.3)
        f = stub_fit(alpha, rng.uniform(0.3, 3, I), kind)
        Y = rng.poisson(rng.uniform(0.2, 4), size=(30, I))
        theta = encode(Y.astype(float), alpha, xi, f.link)
        k = int(rng.integers(K))
        a, b = np.sort(rng.choice(theta[:, k], 2, replace=False)) if np.ptp(theta[:, k]) > 0 else (-1.0, 0.0)
        if a == b:
            b = a + 1.0
        rule = invert_rule(f, k, (a, b), xi_u=xi, support_threshold=0.0)
        for u in range(Y.shape[0]):
            assert rule.contains(Y[u]) == (a < theta[u, k] <= b)
            assert rule.value(Y[u]) == theta[u, k]

    def test_to_json(self):
        f = stub_fit([[0.5], [0.2]], [1.0, 2.0])
        doc = invert_rule(f, 0, (-math.inf, 3), xi_u=2.0).to_json()
        assert doc["interval"] == ["-inf", 3.0]
        assert doc["scaled_interval"] == ["-inf", 1.5]
        assert [s["item"] for s in doc["support"]] == [0, 1]


class TestStratify:
    def setup_method(self):
        self.f = stub_fit([[1.0, 0.2], [0.5, 0.1], [0.25, 0.0]], [1.0, 1.0, 1.0])

    def test_half_and_half_tertiles(self):
        theta = np.array([[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]])
        f = stub_fit([[1.0]], [1.0])
        s = stratify(f, theta, 0, (1 / 3, 2 / 3))
        # linear interpolation: positions 5/3 and 10/3 of the sorted vector
        np.testing.assert_array_equal(s.thresholds, [0.0, 1.0])
        assert s.n_strata == 3 and len(s.rules) == 3

    def test_median_two_strata(self):
        theta = np.arange(10.0)[:, None]
        s = stratify(stub_fit([[1.0]], [1.0]), theta, 0, [0.5])
        assert s.n_strata == 2
        assert np.bincount(s.assignment).sum() == 10
        assert set(s.assignment) == {0, 1}

    def test_constant_column(self):
        with pytest.raises(DegenerateStrataError):
            stratify(stub_fit([[1.0]], [1.0]), np.ones((5, 1)), 0)

    def test_bad_quantiles(self):
        theta = np.arange(10.0)[:, None]
        with pytest.raises(ValueError):
            stratify(stub_fit([[1.0]], [1.0]), theta, 0, (0.6, 0.3))
        with pytest.raises(ValueError):
            stratify(stub_fit([[1.0]], [1.0]), theta, 0, (0.0, 0.5))

    def test_sparse_rows_mostly_low(self):
        rng = np.random.default_rng(0)
        Y = np.zeros((300, 3), dtype=int)
        active = rng.choice(300, 100, replace=False)
        Y[active] = rng.poisson(2.0, size=(100, 3)) + 1
        theta = encode(Y.astype(float), self.f.alpha_mean, 1.0, self.f.link)
        s = stratify(self.f, theta, 0, (1 / 3, 2 / 3))
        counts = np.bincount(s.assignment, minlength=3)
        assert counts[0] > counts[1] + counts[2]

    def test_rules_reproduce_assignment(self):
        rng = np.random.default_rng(1)
        Y = rng.poisson(1.0, size=(200, 3))
        theta = encode(Y.astype(float), self.f.alpha_mean, 1.0, self.f.link)
        s = stratify(self.f, theta, 0, (1 / 3, 2 / 3), support_threshold=0.0)
        via_rules = np.array([[r.contains(y) for r in s.rules].index(True) for y in Y])
        np.testing.assert_array_equal(via_rules, s.assignment)
        np.testing.assert_array_equal(s.assignment, assign_strata(theta[:, 0], s.thresholds))

    def test_to_json_counts(self):
        theta = np.arange(9.0)[:, None]
        doc = stratify(stub_fit([[1.0]], [1.0]), theta, 0, (1 / 3, 2 / 3)).to_json()
        assert sum(doc["counts"]) == 9 and len(doc["strata"]) == 3
