import math

import numpy as np
import pytest

from slotshift.pricing import (
    CapacityError,
    CappedLink,
    Linear,
    Percentile95,
    TpgPeriodTraffic,
    per_user_gradient,
    percentile_95_rate,
    percentile_rank,
    period_cost,
    shapley_gradient,
    shapley_values,
    smoothed_convergence_check,
)


def _traffic(rates, wl=300.0):
    return TpgPeriodTraffic(rates=np.asarray(rates, dtype=float), window_length=wl)


def _oracle(seed=7, users=4, windows=6, wl=300.0):
    rng = np.random.default_rng(seed)
    return _traffic(rng.integers(1, 50, size=(users, windows)), wl)


def _enum(n):
    return math.factorial(n)


class TestPercentileRate:
    def test_constant_traffic(self):
        assert percentile_95_rate(np.full(20, 5.0)) == 5.0

    def test_rank_rule_hundred(self):
        # floor(0.05 * 100) + 1 = 6th largest of 1..100 is 95
        assert percentile_95_rate(np.arange(1.0, 101.0)) == 95.0

    def test_rank_rule_twenty(self):
        # floor(0.05 * 20) + 1 = 2nd largest of 1..20 is 19
        assert percentile_95_rate(np.arange(1.0, 21.0)) == 19.0

    def test_small_window_count_is_max(self):
        assert percentile_rank(6) == 1
        assert percentile_95_rate(np.array([3.0, 9.0, 1.0])) == 9.0

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            percentile_95_rate(np.array([]))

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        x = rng.random(40)
        assert percentile_95_rate(x) == percentile_95_rate(np.sort(x))


class TestPeriodCost:
    def test_empty_subset_costs_nothing(self):
        traffic = _oracle()
        for scheme in (Linear(2.0), Percentile95(rate=2.0),
                       CappedLink(capacity=1e9, free_fraction=0.5)):
            assert period_cost(scheme, traffic, users=[]) == 0.0

    def test_percentile_constant_aggregate(self):
        traffic = _traffic(np.full((1, 20), 5.0))
        assert period_cost(Percentile95(rate=2.0), traffic) == 10.0

    def test_percentile_cost_ignores_price_variant(self):
        traffic = _oracle()
        costs = {period_cost(Percentile95(rate=2.0, variant=v), traffic)
                 for v in ("exact", "modified_top", "smoothed")}
        assert len(costs) == 1

    def test_linear_bills_total_bytes(self):
        traffic = _traffic([[1.0, 2.0], [3.0, 4.0]], wl=43200.0)
        assert period_cost(Linear(0.5), traffic) == 0.5 * 10.0 * 43200.0

    def test_capped_piecewise_value(self):
        # f = 0.9, m = 1, alpha = 0.8 -> (0.9 - 0.8) / (1 - 0.9) = 1 per window
        traffic = _traffic([[0.9, 0.5]], wl=300.0)
        scheme = CappedLink(capacity=1.0, free_fraction=0.8)
        assert period_cost(scheme, traffic) == pytest.approx(300.0 * 1.0, rel=1e-12)

    def test_capped_capacity_exceeded(self):
        traffic = _traffic([[1.0, 0.2]])
        with pytest.raises(CapacityError, match="capacity exceeded"):
            period_cost(CappedLink(capacity=1.0, free_fraction=0.8), traffic)

    def test_subset_selection(self):
        traffic = _traffic([[10.0, 0.0], [0.0, 4.0]], wl=43200.0)
        assert period_cost(Linear(1.0), traffic, users=[0]) == 10.0 * 43200.0
        assert period_cost(Linear(1.0), traffic, users=np.array([False, True])) \
            == 4.0 * 43200.0


class TestShapleyValues:
    def test_single_user_bears_full_cost(self):
        traffic = _oracle(users=1)
        scheme = Percentile95(rate=3.0, variant="exact")
        phi = shapley_values(scheme, traffic, sample_count=1)
        assert phi[0] == pytest.approx(period_cost(scheme, traffic), rel=1e-12)

    @pytest.mark.parametrize("scheme_name", ["linear", "percentile", "capped"])
    def test_efficiency_under_enumeration(self, scheme_name):
        traffic = _oracle(users=4, windows=6)
        scheme = {
            "linear": Linear(2.0),
            "percentile": Percentile95(rate=3.0, variant="exact"),
            "capped": CappedLink(capacity=2.0 * traffic.aggregate.max(),
                                 free_fraction=0.5),
        }[scheme_name]
        phi = shapley_values(scheme, traffic, sample_count=_enum(4))
        total = period_cost(scheme, traffic)
        assert abs(phi.sum() - total) <= 1e-9 * abs(total)

    def test_identical_users_get_equal_shares(self):
        row = np.array([5.0, 1.0, 8.0, 2.0, 4.0, 3.0])
        traffic = _traffic(np.stack([row, row, row]))
        phi = shapley_values(Percentile95(rate=2.0, variant="exact"), traffic,
                             sample_count=_enum(3))
        assert phi == pytest.approx(np.full(3, phi[0]), rel=1e-12)

    def test_sampled_deterministic_under_seed(self):
        traffic = _oracle(users=7, windows=8)
        scheme = Percentile95(rate=1.0)
        a = shapley_values(scheme, traffic, sample_count=50, seed=3)
        b = shapley_values(scheme, traffic, sample_count=50, seed=3)
        assert np.array_equal(a, b)


class TestShapleyGradient:
    def test_linear_price_is_rate_everywhere(self):
        traffic = _oracle()
        assert np.all(shapley_gradient(Linear(3.0), traffic) == 3.0)

    def test_capped_closed_form_points(self):
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 20:
            m = float(rng.uniform(1.0, 100.0))
            alpha = float(rng.uniform(0.1, 0.9))
            f = float(rng.uniform(0.0, 0.999 * m))
            traffic = _traffic([[f]])
            g = shapley_gradient(CappedLink(capacity=m, free_fraction=alpha), traffic)[0]
            expected = 0.0 if f < alpha * m else (1 - alpha) * m / (m - f) ** 2
            assert abs(g - expected) <= 1e-12 * max(1.0, abs(expected))
            checked += 1

    def test_capped_matches_finite_difference_of_cost(self):
        m, alpha, wl = 10.0, 0.6, 300.0
        scheme = CappedLink(capacity=m, free_fraction=alpha)
        for f in (7.0, 8.5, 9.5):
            du = 1e-6
            lo = period_cost(scheme, _traffic([[f - du]], wl))
            hi = period_cost(scheme, _traffic([[f + du]], wl))
            numeric = (hi - lo) / (2 * du * wl)
            g = shapley_gradient(scheme, _traffic([[f]], wl))[0]
            assert g == pytest.approx(numeric, rel=1e-4)

    def test_capped_below_threshold_is_free(self):
        traffic = _traffic([[0.5]])
        assert shapley_gradient(CappedLink(capacity=1.0, free_fraction=0.8),
                                traffic)[0] == 0.0

    def test_capped_at_capacity_errors(self):
        traffic = _traffic([[1.0]])
        with pytest.raises(CapacityError):
            shapley_gradient(CappedLink(capacity=1.0, free_fraction=0.8), traffic)

    def test_exact_prices_sum_to_bill(self):
        # N = 3 users, W = 4 windows, full enumeration
        traffic = _oracle(seed=5, users=3, windows=4)
        scheme = Percentile95(rate=3.0, variant="exact")
        grad = shapley_gradient(scheme, traffic, exact=True)
        total = period_cost(scheme, traffic)
        assert abs(grad.sum() - total) <= 1e-9 * abs(total)

    def test_prices_nonnegative_and_finite(self):
        traffic = _oracle(seed=9, users=5, windows=8)
        for variant in ("exact", "modified_top"):
            g = shapley_gradient(Percentile95(rate=2.0, variant=variant), traffic,
                                 sample_count=200, seed=1)
            assert np.all(g >= 0.0) and np.all(np.isfinite(g))

    def test_rate_scale_covariance(self):
        traffic = _oracle(seed=3, users=4, windows=6)
        base = shapley_gradient(Percentile95(rate=1.0, variant="modified_top"),
                                traffic, exact=True)
        doubled = shapley_gradient(Percentile95(rate=2.0, variant="modified_top"),
                                   traffic, exact=True)
        assert np.array_equal(doubled, 2.0 * base)  # exact for powers of two
        tripled = shapley_gradient(Percentile95(rate=3.0, variant="modified_top"),
                                   traffic, exact=True)
        assert tripled == pytest.approx(3.0 * base, rel=1e-14)

    def test_sampling_unbiased_toward_exact(self):
        traffic = _oracle(seed=13, users=5, windows=6)
        scheme = Percentile95(rate=2.0, variant="modified_top")
        exact = shapley_gradient(scheme, traffic, exact=True)
        estimates = np.stack([
            shapley_gradient(scheme, traffic, sample_count=120, seed=[13, i])
            for i in range(60)
        ])
        se = estimates.std(axis=0, ddof=1) / math.sqrt(len(estimates))
        gap = np.abs(estimates.mean(axis=0) - exact)
        assert np.all(gap <= 4.0 * se + 1e-12)

    @pytest.mark.parametrize("variant", ["modified_top", "smoothed"])
    def test_price_monotone_in_own_window_traffic(self, variant):
        rng = np.random.default_rng(17)
        rates = rng.integers(1, 30, size=(3, 5)).astype(float)
        sigma = 0.3 * percentile_95_rate(rates.sum(axis=0))
        scheme = Percentile95(rate=2.0, variant=variant,
                              sigma=sigma if variant == "smoothed" else 0.0)
        base = shapley_gradient(scheme, _traffic(rates), exact=True)
        for j in range(rates.shape[1]):
            bumped = rates.copy()
            bumped[0, j] *= 1.5
            g = shapley_gradient(scheme, _traffic(bumped), exact=True)
            assert g[j] >= base[j] - 1e-12, f"window {j} price fell on added traffic"


class TestPerUserGradient:
    def test_linear_constant_and_equal_to_rate(self):
        traffic = _oracle(users=3)
        for j in range(traffic.window_count):
            pug = per_user_gradient(Linear(2.5), traffic, j)
            assert np.all(pug.values == 2.5) and pug.mean == 2.5

    def test_capped_constant_across_users(self):
        traffic = _traffic([[0.7, 0.2], [0.2, 0.1]])
        scheme = CappedLink(capacity=1.0, free_fraction=0.5)
        g = shapley_gradient(scheme, traffic)
        pug = per_user_gradient(scheme, traffic, 0)
        assert np.all(pug.values == g[0])

    def test_identity_n3(self):
        traffic = _oracle(seed=21, users=3, windows=4)
        scheme = Percentile95(rate=3.0, variant="exact")
        grad = shapley_gradient(scheme, traffic, exact=True)
        for j in range(traffic.window_count):
            pug = per_user_gradient(scheme, traffic, j)
            expected = (4.0 / 3.0) * grad[j]
            assert abs(pug.mean - expected) <= 1e-9 * max(abs(expected), 1e-12)

    def test_identity_n1_doubles(self):
        traffic = _oracle(seed=2, users=1, windows=6)
        scheme = Percentile95(rate=1.0, variant="exact")
        grad = shapley_gradient(scheme, traffic, exact=True)
        for j in range(6):
            pug = per_user_gradient(scheme, traffic, j)
            assert pug.mean == pytest.approx(2.0 * grad[j], rel=1e-12, abs=1e-15)

    def test_refuses_large_populations(self):
        traffic = _oracle(users=9, windows=4)
        with pytest.raises(ValueError, match="enumeration"):
            per_user_gradient(Percentile95(rate=1.0), traffic, 0)

    def test_window_bounds(self):
        traffic = _oracle(users=2)
        with pytest.raises(ValueError):
            per_user_gradient(Linear(1.0), traffic, 99)


class TestSmoothedConvergence:
    def test_zero_sigma_is_exactly_modified_top(self):
        traffic = _oracle(seed=31, users=4, windows=6)
        disc = smoothed_convergence_check(traffic, [0.0], rate=2.0)
        assert disc[0] == 0.0

    def test_discrepancy_non_increasing_as_sigma_halves(self):
        traffic = _oracle(seed=31, users=4, windows=6)
        level = percentile_95_rate(traffic.aggregate)
        sigmas = [0.4 * level, 0.2 * level, 0.1 * level, 0.05 * level, 0.0]
        disc = smoothed_convergence_check(traffic, sigmas, rate=2.0)
        assert np.all(np.diff(disc) <= 1e-12)
        assert disc[-1] == 0.0

    def test_large_sigma_spreads_price_uniformly(self):
        traffic = _oracle(seed=31, users=4, windows=6)
        level = percentile_95_rate(traffic.aggregate)
        scheme = Percentile95(rate=2.0, variant="smoothed", sigma=1e9 * level)
        g = shapley_gradient(scheme, traffic, exact=True)
        total = period_cost(Percentile95(rate=2.0, variant="exact"), traffic)
        assert g == pytest.approx(np.full(6, total / 6.0), rel=1e-6)


class TestSchemeAndTrafficValidation:
    def test_scheme_invariants(self):
        with pytest.raises(ValueError):
            Linear(rate=-1.0)
        with pytest.raises(ValueError):
            Percentile95(rate=1.0, variant="nearest")
        with pytest.raises(ValueError):
            Percentile95(rate=1.0, sigma=-0.1)
        with pytest.raises(ValueError):
            Percentile95(rate=1.0, sample_count=0)
        with pytest.raises(ValueError):
            CappedLink(capacity=1.0, free_fraction=1.0)
        with pytest.raises(ValueError):
            CappedLink(capacity=0.0, free_fraction=0.5)

    def test_traffic_invariants(self):
        with pytest.raises(ValueError):
            TpgPeriodTraffic(rates=np.array([[-1.0, 2.0]]), window_length=300.0)
        with pytest.raises(ValueError):
            TpgPeriodTraffic(rates=np.ones((2, 2)), window_length=0.0)
        traffic = _traffic([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(traffic.aggregate, [4.0, 6.0])
        assert traffic.user_count == 2 and traffic.window_count == 2
