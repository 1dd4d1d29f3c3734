"""Slot pricing and stable day-to-day traffic shifting.

The package prices (link group, time window) traffic slots under several
ISP cost models and reallocates shiftable demand between slots with a
provably well-behaved day-to-day update, driven by real or synthetic
per-user traffic traces.
"""

from slotshift.traffic import (
    TraceMatrix,
    TpgSplitPolicy,
    TraceError,
    load_trace,
    write_trace,
    generate_synthetic_trace,
    split_by_tpg,
    generate_extra_day,
)
from slotshift.pricing import (
    Linear,
    Percentile95,
    CappedLink,
    CapacityError,
    TpgPeriodTraffic,
    percentile_95_rate,
    period_cost,
    shapley_values,
    shapley_gradient,
    per_user_gradient,
    smoothed_convergence_check,
)
from slotshift.dynamics import (
    Slot,
    SlotGrid,
    ChoiceSet,
    SplitState,
    StepSchedule,
    continuous_rhs,
    lyapunov,
    is_equilibrium,
    integrate,
    discrete_descent,
    apply_update,
    step_splits,
)
from slotshift.choice import (
    ChoiceModelConfig,
    UserShiftProfile,
    draw_profiles,
    shift_proportion,
    build_choice_sets,
    assign,
)
from slotshift.simulate import (
    ScenarioConfig,
    RunResult,
    RepeatSummary,
    run,
    reduction_metric,
    repeat_and_summarize,
    theoretical_max,
)

__version__ = "0.1.0"
