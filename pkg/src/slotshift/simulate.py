"""Trace-driven simulation loop and its evaluation metrics.

Each simulated day: slot prices are computed from the previous day's
realized traffic, split proportions descend against those prices, and the
next day of demand is realized through the updated splits. Days recycle
through the trace (or are synthesized fresh); splits freeze for the final
stretch so the converged cost can be compared against the opening one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from slotshift import choice as choice_mod
from slotshift import pricing as pricing_mod
from slotshift.choice import ChoiceModelConfig, UserShiftProfile, shift_fractions
from slotshift.dynamics import (
    ChoiceSet,
    SlotGrid,
    SplitState,
    StepSchedule,
    lyapunov,
    step_splits,
)
from slotshift.pricing import CapacityError, CappedLink, Percentile95, TpgPeriodTraffic
from slotshift.traffic import (
    TpgSplitPolicy,
    TraceMatrix,
    generate_extra_day,
    generate_synthetic_trace,
    load_trace,
    split_by_tpg,
    split_day_by_tpg,
)

RATIO_PRESETS = {
    "P_E": (1.0, 1.0, 1.0),
    "P_L": (4.0, 2.0, 1.0),
    "P_H": (10.0, 3.0, 1.0),
}

# Stream tags for deriving independent rng streams from (seed, repeat).
_STREAM_SAMPLE = 0
_STREAM_PROFILES = 1
_STREAM_PRICING = 2
_STREAM_ASSIGN = 3
_STREAM_EXTRA_DAY = 4


class ConfigError(ValueError):
    """Scenario configuration failed to parse or validate."""


@dataclass(frozen=True)
class TraceSpec:
    source: str = "synthetic"
    path: str = None
    window_length: float = 3600.0
    users: int = 1000
    days: int = 7
    windows_per_day: int = 24
    diurnal_peak_hour: float = 20.0
    peak_to_trough_ratio: float = 4.0
    user_size_shape: float = 1.0
    mean_daily_bytes: float = 1e8
    trace_seed: int = None  # defaults to the scenario seed

    def __post_init__(self):
        if self.source not in ("synthetic", "file"):
            raise ConfigError("trace.source must be 'synthetic' or 'file'")
        if self.source == "file" and not self.path:
            raise ConfigError("trace.source 'file' needs trace.path")


@dataclass(frozen=True)
class PricingSpec:
    """Per-TPG percentile schemes from a base rate and a ratio vector, or
    explicit scheme definitions via `schemes`."""

    base_rate: float = 1.0
    ratios: tuple = RATIO_PRESETS["P_H"]
    price_function: str = "modified_top"
    sample_count: int = 1000
    sigma: object = "auto"  # float, or "auto" = 0.05 x previous day's billed level
    schemes: tuple = None   # optional explicit per-TPG scheme dicts

    def __post_init__(self):
        if self.price_function not in ("modified_top", "smoothed"):
            raise ConfigError("pricing.price_function must be modified_top or smoothed")
        if self.base_rate < 0:
            raise ConfigError("pricing.base_rate must be >= 0")
        if self.sample_count < 1:
            raise ConfigError("pricing.sample_count must be >= 1")
        if isinstance(self.sigma, str) and self.sigma != "auto":
            raise ConfigError("pricing.sigma must be a number or 'auto'")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))


@dataclass(frozen=True)
class DayStructure:
    warmup: int = 50
    run: int = 500
    freeze_tail: int = 50
    eval_head: int = 50
    day_source: str = "recycle"

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError("days.warmup must be >= 1 (it seeds the first prices)")
        if self.run < 1:
            raise ConfigError("days.run must be >= 1")
        if not 1 <= self.freeze_tail <= self.run:
            raise ConfigError("days.freeze_tail must lie in [1, run]")
        if not 1 <= self.eval_head <= self.warmup:
            # The opening cost is measured over the unadapted warm-up span.
            raise ConfigError("days.eval_head must lie in [1, warmup]")
        if self.day_source not in ("recycle", "synthesize"):
            raise ConfigError("days.day_source must be 'recycle' or 'synthesize'")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    repeats: int = 5
    sample_users: int = None
    trace: TraceSpec = field(default_factory=TraceSpec)
    tpg: TpgSplitPolicy = field(default_factory=lambda: TpgSplitPolicy.preset("T2"))
    pricing: PricingSpec = field(default_factory=PricingSpec)
    choice: ChoiceModelConfig = field(default_factory=ChoiceModelConfig)
    days: DayStructure = field(default_factory=DayStructure)

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.sample_users is not None and self.sample_users < 1:
            raise ConfigError("sample_users must be >= 1 when set")
        if self.pricing.schemes is None and len(self.pricing.ratios) != self.tpg.tpg_count:
            raise ConfigError("pricing.ratios must have one entry per TPG")


def _take(d: dict, allowed: dict, where: str) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return {allowed[k]: v for k, v in d.items()}


def parse_config(data: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from a nested key/value mapping (e.g. YAML).

    Unknown keys are rejected so typos fail before any computation.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    try:
        trace = TraceSpec(**_take(data.pop("trace", {}), {
            "source": "source", "path": "path", "window_length": "window_length",
            "users": "users", "days": "days", "windows_per_day": "windows_per_day",
            "peak_hour": "diurnal_peak_hour", "peak_to_trough_ratio": "peak_to_trough_ratio",
            "user_size_shape": "user_size_shape", "mean_daily_bytes": "mean_daily_bytes",
            "trace_seed": "trace_seed"}, "trace"))

        tpg_raw = dict(data.pop("tpg", {}))
        count = int(tpg_raw.pop("count", 3))
        equal_fraction = float(tpg_raw.pop("equal_fraction", 0.5))
        policy = tpg_raw.pop("policy", "T2")
        peaks = tpg_raw.pop("peak_hours", None)
        if tpg_raw:
            raise ConfigError(f"unknown tpg keys: {sorted(tpg_raw)}")
        if peaks is not None:
            tpg = TpgSplitPolicy(tpg_count=count, peak_hours=tuple(peaks),
                                 equal_fraction=equal_fraction)
        else:
            tpg = TpgSplitPolicy.preset(str(policy), tpg_count=count,
                                        equal_fraction=equal_fraction)

        pricing_raw = _take(data.pop("pricing", {}), {
            "base_rate": "base_rate", "ratios": "ratios",
            "price_function": "price_function", "sample_count": "sample_count",
            "sigma": "sigma", "schemes": "schemes"}, "pricing")
        ratios = pricing_raw.get("ratios", "P_H")
        if isinstance(ratios, str):
            try:
                pricing_raw["ratios"] = RATIO_PRESETS[ratios.upper()]
            except KeyError:
                raise ConfigError(f"unknown ratio preset {ratios!r}")
        else:
            pricing_raw["ratios"] = tuple(ratios)
        if "schemes" in pricing_raw and pricing_raw["schemes"] is not None:
            pricing_raw["schemes"] = tuple(dict(s) for s in pricing_raw["schemes"])
        pricing = PricingSpec(**pricing_raw)

        choice_raw = _take(data.pop("choice", {}), {
            "n_t": "n_t", "n_s": "n_s", "mu_t": "mu_t", "mu_s": "mu_s",
            "max_delay_windows": "max_delay_windows",
            "tpgs_available": "tpgs_available", "assignment": "assignment_policy"},
            "choice")
        if choice_raw.get("tpgs_available") is not None:
            choice_raw["tpgs_available"] = tuple(choice_raw["tpgs_available"])
        choice = ChoiceModelConfig(**choice_raw)

        days = DayStructure(**_take(data.pop("days", {}), {
            "warmup": "warmup", "run": "run", "freeze_tail": "freeze_tail",
            "eval_head": "eval_head", "source": "day_source"}, "days"))

        seed = int(data.pop("seed", 0))
        repeats = int(data.pop("repeats", 5))
        sample_users = data.pop("sample_users", None)
        if sample_users is not None:
            sample_users = int(sample_users)
        if data:
            raise ConfigError(f"unknown config keys: {sorted(data)}")
        return ScenarioConfig(seed=seed, repeats=repeats, sample_users=sample_users,
                              trace=trace, tpg=tpg, pricing=pricing, choice=choice,
                              days=days)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


@dataclass
class RunResult:
    daily_cost: np.ndarray        # warmup + run days
    sum_v: np.ndarray             # nan over the warmup
    p_initial: float
    p_final: float
    reduction: float
    theoretical_max: float
    final_splits: SplitState
    final_prices: np.ndarray
    final_realized: np.ndarray    # last day's realized (user, slot) volumes
    warmup_days: int
    repeat_index: int


@dataclass
class RepeatSummary:
    mean_reduction: float
    cov: float
    two_sigma: float
    theoretical_max: float
    reductions: np.ndarray
    results: list

    @property
    def cell(self) -> str:
        return (f"{self.mean_reduction:.2f} ± {self.two_sigma:.2f} "
                f"({self.theoretical_max:.2f})")


def reduction_metric(head_costs, tail_costs) -> float:
    """(mean(head) - mean(tail)) / mean(head); negative means cost rose."""
    head = np.asarray(head_costs, dtype=np.float64)
    tail = np.asarray(tail_costs, dtype=np.float64)
    if head.size == 0 or tail.size == 0:
        raise ValueError("head and tail cost series must be nonempty")
    p_i = float(head.mean())
    if p_i == 0.0:
        raise ValueError("initial mean cost is zero; reduction undefined")
    return (p_i - float(tail.mean())) / p_i


def theoretical_max(profiles: list, trace: TraceMatrix) -> float:
    """Upper bound on the achievable reduction: the traffic fraction free to
    move at all, i.e. each user's bytes weighted by p_t + p_s - p_t p_s."""
    totals = trace.volume.sum(axis=(1, 2), dtype=np.float64)
    grand = totals.sum()
    if grand <= 0:
        return 0.0
    frac = np.array([p.p_t + p.p_s - p.p_t * p.p_s for p in profiles])
    return float((totals * frac).sum() / grand)


def _load_base_trace(config: ScenarioConfig) -> TraceMatrix:
    spec = config.trace
    if spec.source == "file":
        trace = load_trace(spec.path, spec.window_length)
    else:
        seed = spec.trace_seed if spec.trace_seed is not None else config.seed
        trace = generate_synthetic_trace(
            users=spec.users, days=spec.days, windows_per_day=spec.windows_per_day,
            diurnal_peak_hour=spec.diurnal_peak_hour,
            peak_to_trough_ratio=spec.peak_to_trough_ratio,
            user_size_shape=spec.user_size_shape, seed=seed,
            mean_daily_bytes=spec.mean_daily_bytes)
    if config.sample_users is not None and config.sample_users < trace.users:
        rng = np.random.default_rng([config.seed, _STREAM_SAMPLE])
        keep = np.sort(rng.choice(trace.users, size=config.sample_users, replace=False))
        trace = TraceMatrix(volume=trace.volume[keep],
                            window_length=trace.window_length,
                            user_ids=tuple(trace.user_ids[i] for i in keep))
    return trace


def _build_schemes(config: ScenarioConfig):
    """Per-TPG (pricing scheme template, cost scheme). Percentile cost always
    bills the unmodified 95th-percentile level whatever prices the slots."""
    spec = config.pricing
    out = []
    if spec.schemes is not None:
        if len(spec.schemes) != config.tpg.tpg_count:
            raise ConfigError("pricing.schemes must have one entry per TPG")
        for raw in spec.schemes:
            raw = dict(raw)
            kind = raw.pop("type", "percentile95")
            if kind == "percentile95":
                scheme = Percentile95(rate=float(raw.pop("rate", spec.base_rate)),
                                      variant=raw.pop("variant", spec.price_function),
                                      sigma=float(raw.pop("sigma", 0.0)),
                                      sample_count=int(raw.pop("sample_count",
                                                               spec.sample_count)))
            elif kind == "capped_link":
                scheme = CappedLink(capacity=float(raw.pop("capacity")),
                                    free_fraction=float(raw.pop("free_fraction", 0.8)))
            else:
                raise ConfigError(f"unknown scheme type {kind!r}")
            if raw:
                raise ConfigError(f"unknown scheme keys: {sorted(raw)}")
            out.append(scheme)
        return out
    for ratio in spec.ratios:
        out.append(Percentile95(rate=spec.base_rate * ratio, variant=spec.price_function,
                                sigma=0.0, sample_count=spec.sample_count))
    return out


def _day_scheme(scheme, spec: PricingSpec, prev_aggregate: np.ndarray):
    """Resolve the smoothed sigma ('auto' tracks the previous billed level)."""
    if not isinstance(scheme, Percentile95) or scheme.variant != "smoothed":
        return scheme
    if spec.sigma == "auto":
        level = pricing_mod.percentile_95_rate(prev_aggregate)
        return replace(scheme, sigma=0.05 * level)
    return replace(scheme, sigma=float(spec.sigma))


_CATEGORIES = ("both", "time", "space")
_CAT_FLAGS = {"both": (True, True), "time": (True, False), "space": (False, True)}


def _build_sets(grid: SlotGrid, config: ScenarioConfig):
    """One choice set per (category, origin slot), plus metadata arrays."""
    sets, cat_of, origin_of = [], [], []
    for cat in _CATEGORIES:
        can_time, can_space = _CAT_FLAGS[cat]
        for g in range(grid.tpgs):
            for w in range(grid.windows):
                cs = choice_mod._build_choice_set(
                    grid, grid.slot(g, w), can_time, can_space, config.choice,
                    set_id=len(sets))
                sets.append(cs)
                cat_of.append(cat)
                origin_of.append((g, w))
    return sets, cat_of, origin_of


def run(config: ScenarioConfig, repeat_index: int = 0) -> RunResult:
    """Run the full day loop once and compute the evaluation metrics."""
    trace = _load_base_trace(config)
    n_users = trace.users
    n_windows = trace.windows_per_day
    n_tpgs = config.tpg.tpg_count
    wl = trace.window_length
    grid = SlotGrid(n_tpgs, n_windows)
    n_slots = grid.n_slots

    per_tpg = split_by_tpg(trace, config.tpg)
    # (trace_day, user, slot) float view of the origin traffic
    day_flat = np.empty((trace.days, n_users, n_slots))
    for g, sub in enumerate(per_tpg):
        day_flat[:, :, g * n_windows:(g + 1) * n_windows] = \
            sub.volume.transpose(1, 0, 2).astype(np.float64)

    profiles = choice_mod.draw_profiles(
        config.choice, n_users, [config.seed, repeat_index, _STREAM_PROFILES])
    fracs = np.array([shift_fractions(p) for p in profiles])  # (U, 4)
    frac_by_cat = {"both": fracs[:, 0], "time": fracs[:, 1], "space": fracs[:, 2]}
    frac_immovable = fracs[:, 3]
    t_max = theoretical_max(profiles, trace)

    sets, cat_of, origin_of = _build_sets(grid, config)
    active = [i for i, cat in enumerate(cat_of) if frac_by_cat[cat].any()]
    splits = SplitState.uniform(sets)
    schemes = _build_schemes(config)
    schedule = StepSchedule(horizon=config.days.run)

    days = config.days
    total_days = days.warmup + days.run
    daily_cost = np.empty(total_days)
    sum_v = np.full(total_days, np.nan)
    prices = np.zeros(n_slots)
    prev_realized = None
    policy = config.choice.assignment_policy

    def day_volumes(d: int) -> np.ndarray:
        if days.day_source == "recycle":
            return day_flat[d % trace.days]
        extra = generate_extra_day(trace, [config.seed, repeat_index,
                                           _STREAM_EXTRA_DAY, d])
        tpc = split_day_by_tpg(extra, config.tpg)
        return tpc.transpose(1, 0, 2).reshape(n_users, n_slots)

    for d in range(total_days):
        vols = day_volumes(d)
        in_run = d >= days.warmup
        if in_run:
            t_run = d - days.warmup
            for g in range(n_tpgs):
                traf = TpgPeriodTraffic(
                    rates=prev_realized[:, g * n_windows:(g + 1) * n_windows] / wl,
                    window_length=wl)
                scheme = _day_scheme(schemes[g], config.pricing, traf.aggregate)
                try:
                    prices[g * n_windows:(g + 1) * n_windows] = pricing_mod.shapley_gradient(
                        scheme, traf,
                        seed=[config.seed, repeat_index, _STREAM_PRICING, d, g])
                except CapacityError as exc:
                    raise CapacityError(f"day {d}, TPG {g}: {exc}") from exc
            if t_run < days.run - days.freeze_tail:
                new_rows = list(splits.rows)
                sub_state = step_splits([sets[i] for i in active],
                                        SplitState([splits.rows[i] for i in active]),
                                        prices, schedule, t_run)
                for i, row in zip(active, sub_state.rows):
                    new_rows[i] = row
                splits = SplitState(new_rows)

            realized = vols * frac_immovable[:, None]
            rng_assign = (np.random.default_rng(
                [config.seed, repeat_index, _STREAM_ASSIGN, d])
                if policy == "all_or_nothing" else None)
            demands = np.zeros(len(sets))
            for i in active:
                g, w = origin_of[i]
                v = vols[:, g * n_windows + w] * frac_by_cat[cat_of[i]]
                demands[i] = v.sum()
                cs, row = sets[i], splits.rows[i]
                if policy == "proportional":
                    realized[:, cs.slots] += v[:, None] * row[None, :]
                else:
                    draws = rng_assign.random(n_users)
                    picks = np.searchsorted(np.cumsum(row / row.sum()), draws)
                    picks = np.minimum(picks, cs.size - 1)
                    np.add.at(realized, (np.arange(n_users), cs.slots[picks]), v)

            flows = [demands[i] * splits.rows[i] for i in active]
            sum_v[d] = lyapunov([sets[i] for i in active], flows, prices).sum()
        else:
            realized = vols

        cost = 0.0
        for g in range(n_tpgs):
            traf = TpgPeriodTraffic(
                rates=realized[:, g * n_windows:(g + 1) * n_windows] / wl,
                window_length=wl)
            try:
                cost += pricing_mod.period_cost(schemes[g], traf)
            except CapacityError as exc:
                raise CapacityError(f"day {d}, TPG {g}: {exc}") from exc
        if not np.isfinite(cost):
            raise RuntimeError(f"non-finite total cost on day {d}")
        daily_cost[d] = cost
        prev_realized = realized

    # Opening cost over the unadapted warm-up days vs the frozen tail.
    head = daily_cost[:days.eval_head]
    tail = daily_cost[total_days - days.freeze_tail:]
    reduction = reduction_metric(head, tail)
    return RunResult(daily_cost=daily_cost, sum_v=sum_v,
                     p_initial=float(head.mean()), p_final=float(tail.mean()),
                     reduction=reduction, theoretical_max=t_max,
                     final_splits=splits, final_prices=prices.copy(),
                     final_realized=prev_realized, warmup_days=days.warmup,
                     repeat_index=repeat_index)


def _run_repeat(payload):
    config, repeat_index = payload
    return run(config, repeat_index=repeat_index)


def repeat_and_summarize(config: ScenarioConfig, repeats: int = None,
                         jobs: int = 1) -> RepeatSummary:
    """Run the scenario `repeats` times with derived seeds and summarize.

    Reports the mean reduction, the coefficient of variation (sample std
    over mean), the two-sigma band, and the mean theoretical maximum; the
    `cell` property renders the "x +- y (z)" presentation. Repeats are
    independent given their derived seeds, so jobs > 1 runs them in
    parallel processes without changing any result.
    """
    if repeats is None:
        repeats = config.repeats
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    payloads = [(config, r) for r in range(repeats)]
    if jobs > 1 and repeats > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(jobs, repeats)) as pool:
            results = list(pool.map(_run_repeat, payloads))
    else:
        results = [_run_repeat(p) for p in payloads]
    reductions = np.array([r.reduction for r in results])
    mean = float(reductions.mean())
    std = float(reductions.std(ddof=1)) if repeats > 1 else 0.0
    cov = std / abs(mean) if mean != 0.0 else (0.0 if std == 0.0 else float("inf"))
    t_max = float(np.mean([r.theoretical_max for r in results]))
    return RepeatSummary(mean_reduction=mean, cov=cov, two_sigma=2.0 * std,
                         theoretical_max=t_max, reductions=reductions, results=results)
