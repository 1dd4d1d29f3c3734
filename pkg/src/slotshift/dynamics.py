"""Slots, choice sets, and the traffic reallocation dynamic.

Demand that is free to move carries a choice set: the slots (TPG, window)
it may legally occupy. Flow drains from dearer slots to cheaper ones at a
rate proportional to both the price gap and the flow currently on the dear
slot. The continuous system is integrated with fixed-step Euler under a
Lyapunov watchdog; the day-to-day version updates split proportions with a
price-scale-invariant step whose size decays geometrically over the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Slot:
    """One priceable (TPG, time window) cell with its dense index."""

    tpg: int
    window: int
    id: int


class SlotGrid:
    """Dense indexing of the (tpg, window) slot lattice for one period."""

    def __init__(self, tpgs: int, windows: int):
        if tpgs < 1 or windows < 1:
            raise ValueError("need at least one TPG and one window")
        self.tpgs = tpgs
        self.windows = windows

    @property
    def n_slots(self) -> int:
        return self.tpgs * self.windows

    def slot_id(self, tpg: int, window: int) -> int:
        if not (0 <= tpg < self.tpgs and 0 <= window < self.windows):
            raise ValueError(f"slot ({tpg}, {window}) outside grid")
        return tpg * self.windows + window

    def slot(self, tpg: int, window: int) -> Slot:
        return Slot(tpg=tpg, window=window, id=self.slot_id(tpg, window))

    def tpg_of(self, slot_id: int) -> int:
        return slot_id // self.windows

    def window_of(self, slot_id: int) -> int:
        return slot_id % self.windows

    def all_slots(self) -> list:
        return [Slot(g, w, g * self.windows + w)
                for g in range(self.tpgs) for w in range(self.windows)]


@dataclass
class ChoiceSet:
    """Slots one unit of demand may occupy, with the demand in bytes."""

    id: int
    slots: np.ndarray
    demand: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.slots, dtype=np.intp)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("choice set needs at least one slot")
        if len(np.unique(s)) != s.size:
            raise ValueError("duplicate slots in choice set")
        if self.demand < 0:
            raise ValueError("demand must be >= 0")
        self.slots = s

    @property
    def size(self) -> int:
        return self.slots.size


class SplitState:
    """Split proportions s_ij per choice set: each row is a probability
    vector over that set's slots."""

    def __init__(self, rows: list):
        self.rows = [np.asarray(r, dtype=np.float64) for r in rows]

    @classmethod
    def uniform(cls, choice_sets: list) -> "SplitState":
        return cls([np.full(cs.size, 1.0 / cs.size) for cs in choice_sets])

    def copy(self) -> "SplitState":
        return SplitState([r.copy() for r in self.rows])

    def flows(self, choice_sets: list) -> list:
        """Implied flows X_ij = d_i * s_ij."""
        return [cs.demand * r for cs, r in zip(choice_sets, self.rows)]

    def validate(self, tol: float = 1e-9) -> None:
        for i, r in enumerate(self.rows):
            if np.any(r < -tol) or np.any(r > 1 + tol):
                raise ValueError(f"split row {i} outside [0, 1]")
            if abs(r.sum() - 1.0) > tol:
                raise ValueError(f"split row {i} sums to {r.sum()}, expected 1")


@dataclass(frozen=True)
class StepSchedule:
    """Geometric decay of the per-iteration step scale over the horizon."""

    initial_scale: float = 0.1
    final_scale: float = 0.001
    horizon: int = 500

    def __post_init__(self):
        if not self.initial_scale >= self.final_scale > 0:
            raise ValueError("need initial_scale >= final_scale > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def scale(self, t: int) -> float:
        frac = min(max(t, 0), self.horizon) / self.horizon
        return self.initial_scale * (self.final_scale / self.initial_scale) ** frac


def _excess_price(prices_row: np.ndarray) -> np.ndarray:
    """D[j, k] = (p_j - p_k)_+, how much slot j overprices slot k."""
    diff = prices_row[:, None] - prices_row[None, :]
    return np.maximum(diff, 0.0)


def continuous_rhs(choice_sets: list, flows: list, prices: np.ndarray) -> list:
    """Time derivative of the flows, one array per choice set.

    Built from an exactly antisymmetric pairwise transfer matrix, so each
    row of derivatives sums to zero and singleton sets are frozen.
    """
    out = []
    for cs, x in zip(choice_sets, flows):
        if cs.size == 1:
            out.append(np.zeros(1))
            continue
        d = _excess_price(prices[cs.slots])
        inflow = x[None, :] * d.T          # inflow[j, k] = x_k (p_k - p_j)_+
        transfer = inflow - inflow.T       # antisymmetric by construction
        out.append(transfer.sum(axis=1))
    return out


def lyapunov(choice_sets: list, flows: list, prices: np.ndarray) -> np.ndarray:
    """Per-choice-set V = sum_jk X_j (p_j - p_k)_+^2: nonnegative, zero
    exactly when no flow sits on a slot dearer than another in its set."""
    out = np.empty(len(choice_sets))
    for i, (cs, x) in enumerate(zip(choice_sets, flows)):
        d = _excess_price(prices[cs.slots])
        out[i] = float(x @ np.square(d).sum(axis=1))
    return out


def is_equilibrium(choice_sets: list, flows: list, prices: np.ndarray,
                   eps: float = 0.0) -> np.ndarray:
    """Per-choice-set test: any slot pricier than another by more than eps
    carries at most eps * demand."""
    out = np.empty(len(choice_sets), dtype=bool)
    for i, (cs, x) in enumerate(zip(choice_sets, flows)):
        p = prices[cs.slots]
        demand = float(x.sum())
        dear = p > p.min() + eps
        out[i] = not np.any(dear & (x > eps * demand))
    return out


@dataclass
class IntegrationResult:
    flows: list
    v_series: np.ndarray
    reached_equilibrium: bool
    steps: int
    samples: list = field(default_factory=list)  # (step, flows) snapshots


def integrate(choice_sets: list, flows0: list, price_fn: Callable,
              step: float, max_steps: int, eps: float = None,
              sample_every: int = 0, v_increase_tol: float = 1e-12) -> IntegrationResult:
    """Fixed-step Euler integration of the reallocation dynamic.

    price_fn maps the current flows to a per-slot price vector and must be
    continuous in the flows (flat, capped, or smoothed-percentile prices;
    the exact percentile indicator is discontinuous and will trip the
    watchdog). Total V must not increase between steps: an increase beyond
    tolerance aborts with a suggestion to shrink the step. Demand
    feasibility is re-asserted each step by renormalising every row.

    eps defaults to 1e-6 times the mean starting slot price.
    """
    flows = [np.asarray(x, dtype=np.float64).copy() for x in flows0]
    demands = np.array([cs.demand for cs in choice_sets])
    for cs, x, d in zip(choice_sets, flows, demands):
        if abs(x.sum() - d) > 1e-9 * max(1.0, d):
            raise ValueError(f"flows for choice set {cs.id} do not meet demand {d}")

    prices = np.asarray(price_fn(flows), dtype=np.float64)
    if not np.all(np.isfinite(prices)):
        raise ValueError("price function returned a non-finite price")
    if eps is None:
        eps = 1e-6 * float(np.mean(prices)) if np.any(prices) else 1e-6

    v_series = []
    samples = []
    prev_v = np.inf
    reached = False
    n_steps = 0
    for n in range(max_steps + 1):
        v_total = float(lyapunov(choice_sets, flows, prices).sum())
        v_series.append(v_total)
        if v_total > prev_v + v_increase_tol * max(1.0, prev_v):
            raise RuntimeError(
                f"Lyapunov value rose from {prev_v:.3e} to {v_total:.3e} at step {n}; "
                "step too large, reduce it"
            )
        prev_v = v_total
        if sample_every and n % sample_every == 0:
            samples.append((n, [x.copy() for x in flows]))
        if np.all(is_equilibrium(choice_sets, flows, prices, eps)):
            reached = True
            n_steps = n
            break
        if n == max_steps:
            n_steps = n
            break
        xdot = continuous_rhs(choice_sets, flows, prices)
        for i, (x, dx) in enumerate(zip(flows, xdot)):
            x += step * dx
            np.clip(x, 0.0, None, out=x)
            total = x.sum()
            if total > 0 and demands[i] > 0:
                x *= demands[i] / total
        prices = np.asarray(price_fn(flows), dtype=np.float64)
        if not np.all(np.isfinite(prices)):
            raise ValueError("price function returned a non-finite price")

    return IntegrationResult(flows=flows, v_series=np.asarray(v_series),
                             reached_equilibrium=reached, steps=n_steps, samples=samples)


def discrete_descent(s_row: np.ndarray, prices_row: np.ndarray):
    """Descent direction for one split row and its Euclidean norm.

    sdot_j gains share from dearer slots and sheds share to cheaper ones,
    linearly in the price gaps; the row sum of sdot is zero.
    """
    s = np.asarray(s_row, dtype=np.float64)
    p = np.asarray(prices_row, dtype=np.float64)
    if s.shape != p.shape:
        raise ValueError("split row and price row must align")
    if s.size == 1:
        return np.zeros(1), 0.0
    d = _excess_price(p)
    inflow = s[None, :] * d.T
    sdot = (inflow - inflow.T).sum(axis=1)
    return sdot, float(np.sqrt(np.square(sdot).sum()))


def apply_update(s_row: np.ndarray, sdot_row: np.ndarray, schedule: StepSchedule,
                 t: int, renormalize: bool = True) -> np.ndarray:
    """One day-to-day update of a split row: s += k * sdot with
    k = scale(t) / ||sdot||.

    Normalising by ||sdot|| makes the moved proportion invariant to any
    rescaling of the prices. If the raw step would push any share outside
    [0, 1], k is cut by the largest factor <= 1 that restores feasibility
    (a ratio of shares, so still scale invariant). The final clamp and
    renormalisation only mop up float rounding.
    """
    s = np.asarray(s_row, dtype=np.float64)
    sdot = np.asarray(sdot_row, dtype=np.float64)
    norm = float(np.sqrt(np.square(sdot).sum()))
    if norm == 0.0:
        return s.copy()
    move = (schedule.scale(t) / norm) * sdot

    factor = 1.0
    with np.errstate(divide="ignore", over="ignore"):
        over = move > 0
        if np.any(over):
            headroom = (1.0 - s[over]) / move[over]
            factor = min(factor, float(headroom.min()))
        under = move < 0
        if np.any(under):
            floorroom = s[under] / -move[under]
            factor = min(factor, float(floorroom.min()))
    factor = max(factor, 0.0)

    new = s + factor * move
    np.clip(new, 0.0, 1.0, out=new)
    if renormalize:
        total = new.sum()
        if total > 0:
            new = new / total
    return new


def step_splits(choice_sets: list, splits: SplitState, prices: np.ndarray,
                schedule: StepSchedule, t: int) -> SplitState:
    """Update every choice set's split row against the given slot prices.

    Prices are normalised by their in-set maximum before the descent; the
    update itself is a ratio so this changes nothing mathematically, but it
    makes trajectories reproduce exactly when a whole price vector (or one
    TPG's prices, for sets confined to that TPG) is rescaled.
    """
    new_rows = []
    for cs, row in zip(choice_sets, splits.rows):
        p = prices[cs.slots]
        top = p.max()
        q = p / top if top > 0 else p
        sdot, norm = discrete_descent(row, q)
        if norm == 0.0:
            new_rows.append(row.copy())
        else:
            new_rows.append(apply_update(row, sdot, schedule, t))
    return SplitState(new_rows)
