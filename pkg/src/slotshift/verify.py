"""Exact-enumeration oracle checks runnable from the command line.

Small fixed instances where every permutation can be enumerated, checked
against identities that must hold to numerical precision: cost shares sum
to the bill, per-user price contributions match the slot price through the
(N+1)/N factor, window prices sum to the bill, and the reallocation
dynamic never climbs its Lyapunov function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from slotshift import pricing
from slotshift.dynamics import ChoiceSet, integrate, lyapunov
from slotshift.pricing import CappedLink, Linear, Percentile95, TpgPeriodTraffic


@dataclass
class CheckResult:
    name: str
    passed: bool
    deviation: float
    threshold: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: deviation {self.deviation:.3e} "
                f"(threshold {self.threshold:.1e})")


def _oracle_traffic(seed: int, users: int = 4, windows: int = 6) -> TpgPeriodTraffic:
    rng = np.random.default_rng([seed, 101])
    rates = rng.integers(1, 50, size=(users, windows)).astype(float)
    return TpgPeriodTraffic(rates=rates, window_length=300.0)


def check_shapley_efficiency(seed: int = 0) -> CheckResult:
    """Exact cost shares must sum to the full bill for every scheme."""
    traffic = _oracle_traffic(seed)
    enough = math.factorial(traffic.user_count)
    worst = 0.0
    agg_max = traffic.aggregate.max()
    schemes = [
        Linear(rate=2.0),
        Percentile95(rate=3.0, variant="exact"),
        # capacity chosen so the busiest windows are in the priced band
        CappedLink(capacity=1.5 * agg_max, free_fraction=0.4),
    ]
    for scheme in schemes:
        phi = pricing.shapley_values(scheme, traffic, sample_count=enough)
        total = pricing.period_cost(scheme, traffic)
        worst = max(worst, abs(phi.sum() - total) / max(abs(total), 1e-12))
    return CheckResult("shapley-efficiency", worst <= 1e-9, worst, 1e-9)


def check_per_user_identity(seed: int = 0) -> CheckResult:
    """mean_i of the per-user window contributions = (N+1)/N x slot price."""
    traffic = _oracle_traffic(seed)
    n = traffic.user_count
    scheme = Percentile95(rate=3.0, variant="exact")
    grad = pricing.shapley_gradient(scheme, traffic, exact=True)
    worst = 0.0
    for j in range(traffic.window_count):
        per_user = pricing.per_user_gradient(scheme, traffic, j)
        expected = (n + 1) / n * grad[j]
        scale = max(abs(expected), 1e-12)
        worst = max(worst, abs(per_user.mean - expected) / scale)
    return CheckResult("per-user-gradient-identity", worst <= 1e-9, worst, 1e-9)


def check_price_sum(seed: int = 0) -> CheckResult:
    """Exact-variant window prices must sum to the percentile bill."""
    traffic = _oracle_traffic(seed)
    scheme = Percentile95(rate=3.0, variant="exact")
    grad = pricing.shapley_gradient(scheme, traffic, exact=True)
    total = pricing.period_cost(scheme, traffic)
    dev = abs(grad.sum() - total) / max(abs(total), 1e-12)
    return CheckResult("price-sum-equals-bill", dev <= 1e-9, dev, 1e-9)


def check_lyapunov_descent(seed: int = 0) -> CheckResult:
    """Euler integration of the reallocation dynamic must never raise V."""
    sets = [ChoiceSet(id=0, slots=np.array([0, 1]), demand=8.0),
            ChoiceSet(id=1, slots=np.array([1, 2]), demand=8.0)]
    flows0 = [np.array([8.0, 0.0]), np.array([0.0, 8.0])]
    cap, alpha, linear_price = 20.0, 0.5, 0.4

    def price_fn(flows):
        load = np.zeros(3)
        for cs, x in zip(sets, flows):
            load[cs.slots] += x
        free = alpha * cap
        capped = np.where(load[:2] < free, 0.0,
                          (1 - alpha) * cap / np.square(cap - load[:2]))
        return np.array([capped[0], capped[1], linear_price])

    result = integrate(sets, flows0, price_fn, step=1e-3, max_steps=200_000,
                       eps=1e-6)
    rises = np.diff(result.v_series)
    worst_rise = float(rises.max()) if rises.size else 0.0
    ok = result.reached_equilibrium and worst_rise <= 1e-12
    return CheckResult("lyapunov-descent", ok, max(worst_rise, 0.0), 1e-12)


def run_all(seed: int = 0) -> list:
    return [
        check_shapley_efficiency(seed),
        check_per_user_identity(seed),
        check_price_sum(seed),
        check_lyapunov_descent(seed),
    ]
