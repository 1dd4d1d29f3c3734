"""User shifting eligibility, choice-set construction, and assignment.

Each user is tested once against population thresholds for time and space
shifting; eligible users draw the proportion of their data that can move
as R^((1-mu)/mu), which has mean mu over the population and ranges up to
shifting everything. Time and space eligibility are independent, so a
user's volume partitions into both/time-only/space-only/immovable parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slotshift.dynamics import ChoiceSet, Slot, SlotGrid

ASSIGNMENT_POLICIES = ("proportional", "all_or_nothing")


@dataclass(frozen=True)
class ChoiceModelConfig:
    """Population shifting knobs.

    n_t / n_s: fraction of users eligible to shift in time / space.
    mu_t / mu_s: mean proportion of data shifted by eligible users.
    max_delay_windows: how far traffic may be delayed (windows).
    tpgs_available: TPG indices reachable by space shifting (None = all).
    """

    n_t: float = 1.0
    n_s: float = 1.0
    mu_t: float = 0.1
    mu_s: float = 0.2
    max_delay_windows: int = 18
    tpgs_available: tuple = None
    assignment_policy: str = "proportional"

    def __post_init__(self):
        for name in ("n_t", "n_s", "mu_t", "mu_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_delay_windows < 0:
            raise ValueError("max_delay_windows must be >= 0")
        if self.assignment_policy not in ASSIGNMENT_POLICIES:
            raise ValueError(f"assignment_policy must be one of {ASSIGNMENT_POLICIES}")
        if self.tpgs_available is not None:
            object.__setattr__(self, "tpgs_available",
                               tuple(int(g) for g in self.tpgs_available))


@dataclass(frozen=True)
class UserShiftProfile:
    user: int
    can_time: bool
    can_space: bool
    p_t: float
    p_s: float


def shift_proportion(r: np.ndarray, mu: float) -> np.ndarray:
    """Proportion of data shifted given uniform draws r: R^((1-mu)/mu).

    mu = 0 is the everything-stays limit (exactly 0); mu = 1 means every
    eligible user shifts all of it (exactly 1).
    """
    r = np.asarray(r, dtype=np.float64)
    if mu <= 0.0:
        return np.zeros_like(r)
    if mu >= 1.0:
        return np.ones_like(r)
    return np.power(r, (1.0 - mu) / mu)


def draw_profiles(config: ChoiceModelConfig, users: int, seed) -> list:
    """Draw one fixed shifting profile per user.

    Draws are consumed row-major from a single stream, so profile u depends
    only on (seed, u): extending the population never reshuffles existing
    profiles.
    """
    draws = np.random.default_rng(seed).random((users, 4))
    can_t = draws[:, 0] < config.n_t
    can_s = draws[:, 1] < config.n_s
    p_t = np.where(can_t, shift_proportion(draws[:, 2], config.mu_t), 0.0)
    p_s = np.where(can_s, shift_proportion(draws[:, 3], config.mu_s), 0.0)
    return [
        UserShiftProfile(user=u, can_time=bool(can_t[u]), can_space=bool(can_s[u]),
                         p_t=float(p_t[u]), p_s=float(p_s[u]))
        for u in range(users)
    ]


def shift_fractions(profile: UserShiftProfile) -> tuple:
    """Partition of a user's volume into (both, time_only, space_only,
    immovable) fractions, assuming time/space shiftability independent."""
    both = profile.p_t * profile.p_s
    return (both, profile.p_t - both, profile.p_s - both,
            1.0 - profile.p_t - profile.p_s + both)


def build_choice_sets(grid: SlotGrid, profile: UserShiftProfile, origin_slot: Slot,
                      config: ChoiceModelConfig, set_id: int = 0) -> ChoiceSet:
    """The slots traffic with this profile may occupy, starting from origin.

    Immovable traffic gets the singleton; space shifting opens the
    available TPGs in the origin window; time shifting opens the origin
    TPG over the next max_delay_windows windows (wrapping into the next
    day's windows, which the rolling day loop recycles); both gives the
    cartesian product. The origin slot always comes first.
    """
    return _build_choice_set(grid, origin_slot, profile.can_time, profile.can_space,
                             config, set_id)


def _build_choice_set(grid: SlotGrid, origin: Slot, can_time: bool, can_space: bool,
                      config: ChoiceModelConfig, set_id: int = 0) -> ChoiceSet:
    if can_space:
        tpgs = list(config.tpgs_available) if config.tpgs_available is not None \
            else list(range(grid.tpgs))
        if origin.tpg not in tpgs:
            tpgs = [origin.tpg] + tpgs
        else:
            tpgs = [origin.tpg] + [g for g in tpgs if g != origin.tpg]
    else:
        tpgs = [origin.tpg]
    if can_time:
        delay = min(config.max_delay_windows, grid.windows - 1)
        windows = [(origin.window + d) % grid.windows for d in range(delay + 1)]
    else:
        windows = [origin.window]
    slots = [grid.slot_id(g, w) for g in tpgs for w in windows]
    return ChoiceSet(id=set_id, slots=np.asarray(slots, dtype=np.intp))


def assign(volume: float, choice_set: ChoiceSet, split_row: np.ndarray, policy: str,
           rng: np.random.Generator = None) -> np.ndarray:
    """Realize one unit of demand over its choice set's slots.

    Proportional puts volume * s_j on each slot, with the float remainder
    folded into the largest-share slot so the total is conserved exactly.
    All-or-nothing lands everything on one slot sampled by the shares.
    """
    s = np.asarray(split_row, dtype=np.float64)
    if s.shape != (choice_set.size,):
        raise ValueError("split row does not match choice set")
    if choice_set.size == 1:
        return np.array([float(volume)])
    if policy == "proportional":
        volume = float(volume)
        if volume == 0.0:
            return np.zeros(choice_set.size)
        # Quantize shares to multiples of one ulp of the volume and hand the
        # remainder to the largest share: every partial sum is then an exact
        # multiple of that ulp, so the outputs sum to the input in any order.
        unit = np.spacing(volume)
        out = np.floor(volume * s / unit) * unit
        top = int(np.argmax(s))
        out[top] = volume - (out.sum() - out[top])
        return out
    if policy == "all_or_nothing":
        if rng is None:
            raise ValueError("all_or_nothing assignment needs an rng")
        probs = s / s.sum()
        j = int(rng.choice(choice_set.size, p=probs))
        out = np.zeros(choice_set.size)
        out[j] = volume
        return out
    raise ValueError(f"unknown assignment policy {policy!r}")
