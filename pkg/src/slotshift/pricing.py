"""Billing-period costs and per-window slot prices.

Three cost models are supported: a flat per-byte rate, the 95th-percentile
rate schemes common on transit links, and capped links that are free below
a utilisation threshold and blow up near capacity (M/M/1-style).

Percentile slot prices are computed by randomising the order in which
users arrive, crediting each user's marginal cost increase to the window
set that carries the new 95th-percentile level, and averaging over
orderings. Summed over windows this attribution reproduces the bill
actually paid. Three crediting variants exist:

- "exact": credit only windows sitting exactly at the percentile level
  (ties share equally).
- "modified_top": credit every window at or above the percentile level,
  shared equally, which keeps prices monotone in a window's own traffic
  and stops the optimiser from burying traffic in the top 5%.
- "smoothed": like modified_top but windows below the level get Gaussian
  weight exp(-(gap/sigma)^2), making the price differentiable in traffic;
  sigma -> 0 recovers modified_top exactly.

Flat and capped schemes have closed-form prices (the rate itself, and the
derivative of the capped cost curve), so no sampling is involved there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import NamedTuple, Union

import numpy as np

PRICE_VARIANTS = ("exact", "modified_top", "smoothed")


class CapacityError(RuntimeError):
    """A capped link was driven to or past its maximum rate."""


@dataclass(frozen=True)
class Linear:
    """Flat volume pricing: money per byte."""

    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


@dataclass(frozen=True)
class Percentile95:
    """95th-percentile billing at `rate` money per (byte/second).

    variant picks the price-crediting rule (see module docstring); sigma is
    the Gaussian falloff in traffic-rate units, used only by "smoothed";
    sample_count is the default number of sampled user orderings.
    """

    rate: float
    variant: str = "modified_top"
    sigma: float = 0.0
    sample_count: int = 1000

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if self.variant not in PRICE_VARIANTS:
            raise ValueError(f"variant must be one of {PRICE_VARIANTS}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass(frozen=True)
class CappedLink:
    """Fixed-cost link of maximum rate `capacity`, unpriced below
    free_fraction * capacity, cost rising to infinity at capacity."""

    capacity: float
    free_fraction: float

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be > 0")
        if not 0.0 < self.free_fraction < 1.0:
            raise ValueError("free_fraction must lie strictly in (0, 1)")


PricingScheme = Union[Linear, Percentile95, CappedLink]


@dataclass(frozen=True)
class TpgPeriodTraffic:
    """Per-user mean flow rates for one TPG over one billing period.

    rates has shape (users, windows) in bytes/second; window_length is the
    window duration in seconds.
    """

    rates: np.ndarray
    window_length: float

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.rates, dtype=np.float64))
        if r.ndim != 2:
            raise ValueError(f"rates must be 2-d (users, windows), got shape {r.shape}")
        if r.shape[1] < 1:
            raise ValueError("need at least one window")
        if np.any(r < 0):
            raise ValueError("negative rates")
        if self.window_length <= 0:
            raise ValueError("window_length must be positive")
        r.setflags(write=False)
        object.__setattr__(self, "rates", r)

    @classmethod
    def from_volumes(cls, volumes: np.ndarray, window_length: float) -> "TpgPeriodTraffic":
        return cls(rates=np.asarray(volumes, dtype=np.float64) / window_length,
                   window_length=window_length)

    @property
    def user_count(self) -> int:
        return self.rates.shape[0]

    @property
    def window_count(self) -> int:
        return self.rates.shape[1]

    @property
    def aggregate(self) -> np.ndarray:
        return self.rates.sum(axis=0)


def percentile_rank(window_count: int) -> int:
    """Order-statistic rank k used for the 95th percentile: discard the top
    5% of windows and bill the next one, i.e. the (floor(0.05 W) + 1)-th
    largest value."""
    return int(math.floor(0.05 * window_count)) + 1


def percentile_95_rate(aggregate: np.ndarray) -> float:
    """The billed 95th-percentile rate of a per-window aggregate vector."""
    agg = np.asarray(aggregate, dtype=np.float64)
    if agg.ndim != 1 or agg.size == 0:
        raise ValueError("aggregate must be a nonempty 1-d vector")
    k = percentile_rank(agg.size)
    return float(np.partition(agg, agg.size - k)[agg.size - k])


def _kth_largest_rows(agg: np.ndarray, k: int) -> np.ndarray:
    """k-th largest value of each row of a 2-d array."""
    idx = agg.shape[1] - k
    return np.partition(agg, idx, axis=1)[:, idx]


def _capped_cost_rate(aggregate: np.ndarray, capacity: float, alpha: float) -> np.ndarray:
    """Per-window cost level of a capped link; raises at/beyond capacity."""
    f = np.asarray(aggregate, dtype=np.float64)
    if np.any(f >= capacity):
        worst = int(np.argmax(f))
        raise CapacityError(
            f"capacity exceeded: window {worst} carries {f[worst]:.6g} >= {capacity:.6g}"
        )
    free = alpha * capacity
    return np.where(f < free, 0.0, (f - free) / (capacity - f))


def _subset_rates(traffic: TpgPeriodTraffic, users) -> np.ndarray:
    if users is None:
        return traffic.rates
    idx = np.asarray(users)
    if idx.dtype == bool:
        return traffic.rates[idx]
    return traffic.rates[idx.astype(np.intp)]


def period_cost(scheme: PricingScheme, traffic: TpgPeriodTraffic, users=None) -> float:
    """Money paid for one billing period by the given user subset (all users
    when `users` is None).

    Percentile TPGs always pay rate x the unmodified 95th-percentile level,
    regardless of which crediting variant prices the slots.
    """
    rates = _subset_rates(traffic, users)
    if rates.shape[0] == 0:
        agg = np.zeros(traffic.window_count)
    else:
        agg = rates.sum(axis=0)
    if isinstance(scheme, Linear):
        return float(scheme.rate * agg.sum() * traffic.window_length)
    if isinstance(scheme, Percentile95):
        return float(scheme.rate * percentile_95_rate(agg))
    if isinstance(scheme, CappedLink):
        c = _capped_cost_rate(agg, scheme.capacity, scheme.free_fraction)
        return float(c.sum() * traffic.window_length)
    raise TypeError(f"unknown pricing scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Permutation machinery shared by the Shapley value and the slot prices.

def _all_permutations(n: int) -> np.ndarray:
    return np.array(list(permutations(range(n))), dtype=np.intp)


def _sample_permutations(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    base = np.tile(np.arange(n, dtype=np.intp), (count, 1))
    return rng.permuted(base, axis=1)


def _choose_permutations(n: int, sample_count: int, seed) -> np.ndarray:
    """All n! orderings when the budget covers them, else a random sample."""
    try:
        total = math.factorial(n)
    except OverflowError:
        total = None
    if total is not None and sample_count >= total and total <= 50_000:
        return _all_permutations(n)
    rng = np.random.default_rng(seed)
    return _sample_permutations(n, sample_count, rng)


def _credit_weights(agg: np.ndarray, level: np.ndarray, variant: str,
                    sigma: float) -> np.ndarray:
    """Row-normalised window credit weights for a block of arrangements.

    agg is (K, W) prefix aggregates, level the (K,) percentile of each row.
    Rows always sum to 1: at least one window sits at the level.
    """
    lvl = level[:, None]
    if variant == "exact":
        w = (agg == lvl).astype(np.float64)
    elif variant == "modified_top" or (variant == "smoothed" and sigma <= 0.0):
        # sigma = 0 degenerates the Gaussian to the at-or-above indicator.
        w = (agg >= lvl).astype(np.float64)
    elif variant == "smoothed":
        gap = lvl - agg
        w = np.where(gap <= 0.0, 1.0, np.exp(-np.square(gap / sigma)))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return w / w.sum(axis=1, keepdims=True)


try:
    from numba import njit as _njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


@_njit(cache=True)
def _gradient_kernel(rates, perms, k, variant, sigma):  # pragma: no cover - compiled
    """Hot loop of the percentile window attribution (variant codes:
    0 exact, 1 modified_top, 2 smoothed with sigma > 0)."""
    n_perms, n_users = perms.shape
    n_windows = rates.shape[1]
    out = np.zeros(n_windows)
    agg = np.empty(n_windows)
    top = np.empty(k)
    for p in range(n_perms):
        for w in range(n_windows):
            agg[w] = 0.0
        prev = 0.0
        for step in range(n_users):
            u = perms[p, step]
            for w in range(n_windows):
                agg[w] += rates[u, w]
            filled = 0
            for w in range(n_windows):
                v = agg[w]
                if filled < k:
                    i = filled
                    while i > 0 and top[i - 1] < v:
                        top[i] = top[i - 1]
                        i -= 1
                    top[i] = v
                    filled += 1
                elif v > top[k - 1]:
                    i = k - 1
                    while i > 0 and top[i - 1] < v:
                        top[i] = top[i - 1]
                        i -= 1
                    top[i] = v
            level = top[k - 1]
            delta = level - prev
            prev = level
            if delta != 0.0:
                if variant == 0:
                    count = 0
                    for w in range(n_windows):
                        if agg[w] == level:
                            count += 1
                    inc = delta / count
                    for w in range(n_windows):
                        if agg[w] == level:
                            out[w] += inc
                elif variant == 1:
                    count = 0
                    for w in range(n_windows):
                        if agg[w] >= level:
                            count += 1
                    inc = delta / count
                    for w in range(n_windows):
                        if agg[w] >= level:
                            out[w] += inc
                else:
                    total = 0.0
                    for w in range(n_windows):
                        if agg[w] >= level:
                            total += 1.0
                        else:
                            g = (level - agg[w]) / sigma
                            total += np.exp(-g * g)
                    for w in range(n_windows):
                        if agg[w] >= level:
                            out[w] += delta / total
                        else:
                            g = (level - agg[w]) / sigma
                            out[w] += delta * np.exp(-g * g) / total
    return out / n_perms


def _percentile_gradient_loop(rates: np.ndarray, perms: np.ndarray, variant: str,
                              sigma: float) -> np.ndarray:
    """Pure-numpy attribution loop (fallback when numba is unavailable)."""
    n_users, n_windows = rates.shape
    k = percentile_rank(n_windows)
    n_perms = perms.shape[0]
    agg = np.zeros((n_perms, n_windows))
    prev = np.zeros(n_perms)
    out = np.zeros(n_windows)
    for step in range(n_users):
        agg += rates[perms[:, step]]
        level = _kth_largest_rows(agg, k)
        delta = level - prev
        weights = _credit_weights(agg, level, variant, sigma)
        out += delta @ weights
        prev = level
    return out / n_perms


def _percentile_gradient_core(rates: np.ndarray, perms: np.ndarray, variant: str,
                              sigma: float) -> np.ndarray:
    """Unit-rate window attribution averaged over the given orderings.

    For each ordering, users arrive one at a time; the rise in the prefix
    95th-percentile level is credited to the windows selected by the
    variant's weights. Returns shape (windows,).
    """
    if _HAVE_NUMBA:
        code = {"exact": 0, "modified_top": 1, "smoothed": 2}[variant]
        if code == 2 and sigma <= 0.0:
            code = 1
        k = percentile_rank(rates.shape[1])
        return _gradient_kernel(np.ascontiguousarray(rates),
                                np.ascontiguousarray(perms, dtype=np.int64),
                                k, code, float(sigma))
    return _percentile_gradient_loop(rates, perms, variant, sigma)


def _percentile_user_attribution(rates: np.ndarray, perms: np.ndarray, variant: str,
                                 sigma: float) -> np.ndarray:
    """Per-user, per-window attribution of the percentile bill, shape (N, W).

    Summed over windows this is each user's Shapley share of the bill;
    summed over users it is the window price vector."""
    n_users, n_windows = rates.shape
    k = percentile_rank(n_windows)
    n_perms = perms.shape[0]
    agg = np.zeros((n_perms, n_windows))
    prev = np.zeros(n_perms)
    psi = np.zeros((n_users, n_windows))
    for step in range(n_users):
        arrivals = perms[:, step]
        agg += rates[arrivals]
        level = _kth_largest_rows(agg, k)
        delta = level - prev
        np.add.at(psi, arrivals, delta[:, None] * _credit_weights(agg, level, variant, sigma))
        prev = level
    return psi / n_perms


def _permutation_user_marginals(value_rows, rates: np.ndarray,
                                perms: np.ndarray) -> np.ndarray:
    """Average per-user marginal of a set-value function over orderings.

    value_rows maps (K, W) prefix aggregates to (K,) values.
    """
    n_users = rates.shape[0]
    n_perms = perms.shape[0]
    agg = np.zeros((n_perms, rates.shape[1]))
    prev = np.zeros(n_perms)
    phi = np.zeros(n_users)
    for step in range(n_users):
        arrivals = perms[:, step]
        agg += rates[arrivals]
        val = value_rows(agg)
        np.add.at(phi, arrivals, val - prev)
        prev = val
    return phi / n_perms


def shapley_values(scheme: PricingScheme, traffic: TpgPeriodTraffic,
                   sample_count: int = None, seed=None) -> np.ndarray:
    """Per-user cost shares: average marginal contribution over user
    orderings (all N! of them when sample_count covers N!, else sampled).

    Efficiency holds by construction: the shares sum to period_cost.
    """
    rates = traffic.rates
    n = traffic.user_count
    if n < 1:
        raise ValueError("need at least one user")
    if isinstance(scheme, Linear):
        # Order never matters for volume pricing.
        return scheme.rate * rates.sum(axis=1) * traffic.window_length

    if sample_count is None:
        sample_count = scheme.sample_count if isinstance(scheme, Percentile95) else 1000
    perms = _choose_permutations(n, sample_count, seed)

    if isinstance(scheme, Percentile95):
        k = percentile_rank(traffic.window_count)
        idx = traffic.window_count - k
        value = lambda agg: np.partition(agg, idx, axis=1)[:, idx]
        return scheme.rate * _permutation_user_marginals(value, rates, perms)
    if isinstance(scheme, CappedLink):
        _capped_cost_rate(traffic.aggregate, scheme.capacity, scheme.free_fraction)
        wl = traffic.window_length
        m, a = scheme.capacity, scheme.free_fraction

        def value(agg):
            free = a * m
            c = np.where(agg < free, 0.0, (agg - free) / (m - agg))
            return c.sum(axis=1) * wl

        return _permutation_user_marginals(value, rates, perms)
    raise TypeError(f"unknown pricing scheme {scheme!r}")


def shapley_gradient(scheme: PricingScheme, traffic: TpgPeriodTraffic,
                     sample_count: int = None, seed=None,
                     exact: bool = False) -> np.ndarray:
    """Per-window slot price vector for one TPG, shape (windows,).

    Flat pricing returns the rate in every window; a capped link returns
    the closed-form derivative of its cost curve at the current aggregate.
    Percentile pricing attributes sampled marginal bill increases to
    windows (see module docstring); one shared permutation stream prices
    every window of the TPG at once. With exact=True every user ordering
    is enumerated instead of sampled (small populations only).
    """
    n_windows = traffic.window_count
    if isinstance(scheme, Linear):
        return np.full(n_windows, scheme.rate)
    if isinstance(scheme, CappedLink):
        f = traffic.aggregate
        m, a = scheme.capacity, scheme.free_fraction
        if np.any(f >= m):
            worst = int(np.argmax(f))
            raise CapacityError(
                f"capacity exceeded: window {worst} carries {f[worst]:.6g} >= {m:.6g}"
            )
        grad = np.where(f < a * m, 0.0, (1.0 - a) * m / np.square(m - f))
        return grad
    if isinstance(scheme, Percentile95):
        n = traffic.user_count
        if n < 1:
            raise ValueError("need at least one user")
        if exact:
            if n > 9:
                raise ValueError(f"exact enumeration limited to 9 users, got {n}")
            perms = _all_permutations(n)
        else:
            if sample_count is None:
                sample_count = scheme.sample_count
            perms = _sample_permutations(n, sample_count, np.random.default_rng(seed))
        base = _percentile_gradient_core(traffic.rates, perms, scheme.variant, scheme.sigma)
        prices = scheme.rate * base
        if not np.all(np.isfinite(prices)):
            raise ValueError("non-finite slot price")
        # Analytically >= 0; the clamp only guards float rounding.
        return np.maximum(prices, 0.0)
    raise TypeError(f"unknown pricing scheme {scheme!r}")


class PerUserGradient(NamedTuple):
    values: np.ndarray
    mean: float


def per_user_gradient(scheme: PricingScheme, traffic: TpgPeriodTraffic, window: int,
                      max_users: int = 8) -> PerUserGradient:
    """Per-user price contributions for one window under full enumeration.

    For flat and capped schemes every user sees the same marginal price, so
    the values are the slot price itself. For percentile pricing the values
    are (N+1) times each user's window-attributed bill share; their mean
    equals (N+1)/N times the exact slot price. Intended as a small-N test
    oracle; refuses N above max_users.
    """
    n = traffic.user_count
    if not 0 <= window < traffic.window_count:
        raise ValueError(f"window {window} out of range")
    if isinstance(scheme, (Linear, CappedLink)):
        g = shapley_gradient(scheme, traffic)[window]
        values = np.full(n, g)
        return PerUserGradient(values=values, mean=float(g))
    if isinstance(scheme, Percentile95):
        if n > max_users:
            raise ValueError(
                f"exact enumeration limited to {max_users} users, got {n}"
            )
        perms = _all_permutations(n)
        psi = scheme.rate * _percentile_user_attribution(
            traffic.rates, perms, scheme.variant, scheme.sigma)
        values = (n + 1) * psi[:, window]
        return PerUserGradient(values=values, mean=float(values.mean()))
    raise TypeError(f"unknown pricing scheme {scheme!r}")


def smoothed_convergence_check(traffic: TpgPeriodTraffic, sigmas, rate: float = 1.0,
                               sample_count: int = None, seed=None) -> np.ndarray:
    """Max |smoothed price - modified_top price| for each sigma, using one
    shared permutation sample (common random numbers across sigmas).

    The discrepancy shrinks as sigma -> 0 and is exactly 0 at sigma = 0.
    """
    n = traffic.user_count
    if sample_count is None:
        sample_count = math.factorial(n) if n <= 8 else 1000
    perms = _choose_permutations(n, sample_count, seed)
    reference = rate * _percentile_gradient_core(traffic.rates, perms, "modified_top", 0.0)
    sigmas = list(sigmas)
    out = np.empty(len(sigmas))
    for i, sigma in enumerate(sigmas):
        smoothed = rate * _percentile_gradient_core(traffic.rates, perms, "smoothed",
                                                    float(sigma))
        out[i] = np.max(np.abs(smoothed - reference))
    return out
