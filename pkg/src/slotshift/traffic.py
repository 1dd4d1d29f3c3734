"""Per-user traffic demand: loading, synthesis, TPG splitting, extra days.

A trace holds the bytes each user moved in each time window of each day.
Traffic pricing groups (TPGs) are carved out of a trace with a weighted
cosine split that gives each group a slightly different diurnal peak, and
extra synthetic days can be drawn that keep the per-user day shapes and
the day-total statistics of the source trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

SECONDS_PER_DAY = 86400

TRACE_HEADER = ("user_id", "day", "window", "bytes")


class TraceError(ValueError):
    """Malformed or inconsistent trace input."""


@dataclass(frozen=True)
class TraceMatrix:
    """Per-user per-window demand volumes for a span of days.

    volume has shape (users, days, windows_per_day) and holds bytes as
    int64. Immutable after construction; window_length is in seconds and
    must tile the day exactly.
    """

    volume: np.ndarray
    window_length: float
    user_ids: tuple = None

    def __post_init__(self):
        vol = np.asarray(self.volume)
        if vol.ndim != 3:
            raise TraceError(f"volume must be 3-d (users, days, windows), got shape {vol.shape}")
        if np.any(vol < 0):
            raise TraceError("negative volume in trace")
        if self.window_length <= 0:
            raise TraceError("window_length must be positive")
        wpd = vol.shape[2]
        if abs(self.window_length * wpd - SECONDS_PER_DAY) > 1e-6:
            raise TraceError(
                f"window_length {self.window_length}s x {wpd} windows does not cover one day"
            )
        vol = np.ascontiguousarray(vol)
        vol.setflags(write=False)
        object.__setattr__(self, "volume", vol)
        if self.user_ids is None:
            object.__setattr__(self, "user_ids", tuple(str(i) for i in range(vol.shape[0])))
        elif len(self.user_ids) != vol.shape[0]:
            raise TraceError("user_ids length does not match volume")

    @property
    def users(self) -> int:
        return self.volume.shape[0]

    @property
    def days(self) -> int:
        return self.volume.shape[1]

    @property
    def windows_per_day(self) -> int:
        return self.volume.shape[2]

    def daily_totals(self) -> np.ndarray:
        """Total bytes per day, summed over users and windows."""
        return self.volume.sum(axis=(0, 2), dtype=np.float64)

    def total_bytes(self) -> float:
        return float(self.volume.sum(dtype=np.float64))


@dataclass(frozen=True)
class TpgSplitPolicy:
    """How aggregate traffic is carved into traffic pricing groups.

    Each group g gets a per-window share equal_fraction/tpg_count plus the
    remaining mass weighted by w_g(t) = 1 + cos((t - peak_hour_g) * 2pi/24).
    The raw cosine can be negative, so weights are lifted by one and
    normalised per window; this keeps every share positive and the peak at
    peak_hour_g.
    """

    tpg_count: int
    peak_hours: tuple
    equal_fraction: float = 0.5

    def __post_init__(self):
        if self.tpg_count < 1:
            raise ValueError("tpg_count must be >= 1")
        if len(self.peak_hours) != self.tpg_count:
            raise ValueError("peak_hours must have one entry per TPG")
        if not 0.0 <= self.equal_fraction <= 1.0:
            raise ValueError("equal_fraction must lie in [0, 1]")
        object.__setattr__(self, "peak_hours", tuple(float(p) for p in self.peak_hours))

    @classmethod
    def preset(cls, name: str, tpg_count: int = 3, equal_fraction: float = 0.5) -> "TpgSplitPolicy":
        """Named peak layouts: T0 (all equal), T2 (2 h apart), T4 (4 h apart)."""
        spacing = {"T0": 0.0, "T2": 2.0, "T4": 4.0}
        try:
            step = spacing[name.upper()]
        except KeyError:
            raise ValueError(f"unknown split policy {name!r}; expected one of {sorted(spacing)}")
        peaks = tuple(step * i for i in range(tpg_count))
        return cls(tpg_count=tpg_count, peak_hours=peaks, equal_fraction=equal_fraction)

    def window_shares(self, windows_per_day: int) -> np.ndarray:
        """Per-window share of traffic for each TPG, shape (tpg_count, windows)."""
        hours = np.arange(windows_per_day) * (24.0 / windows_per_day)
        peaks = np.asarray(self.peak_hours)[:, None]
        w = 1.0 + np.cos((hours[None, :] - peaks) * (2.0 * np.pi / 24.0))
        totals = w.sum(axis=0)
        # 1+cos can make every weight vanish at a single window (all peaks
        # equal, 12 h off-peak); fall back to an equal split there.
        safe = totals > 1e-12
        cosine_share = np.where(safe[None, :], w / np.where(safe, totals, 1.0)[None, :],
                                1.0 / self.tpg_count)
        return self.equal_fraction / self.tpg_count + (1.0 - self.equal_fraction) * cosine_share


def load_trace(path, window_length: float) -> TraceMatrix:
    """Load a CSV trace (header user_id,day,window,bytes; 0-indexed indices).

    Missing cells are zero-filled. Rows with indices outside the implied
    grid, negative volumes, or unparseable fields are rejected with the
    offending line number.
    """
    wpd = SECONDS_PER_DAY / window_length
    if abs(wpd - round(wpd)) > 1e-9:
        raise TraceError(f"window_length {window_length}s does not divide one day")
    wpd = int(round(wpd))

    records = []
    user_order = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise TraceError(f"trace file not found: {path}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceError(f"{path}: no records")
        if [h.strip() for h in header] != list(TRACE_HEADER):
            raise TraceError(f"{path}: line 1: expected header {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise TraceError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            user = row[0].strip()
            try:
                day = int(row[1])
                window = int(row[2])
                nbytes = int(row[3])
            except ValueError:
                raise TraceError(f"{path}: line {lineno}: could not parse integer fields")
            if day < 0 or window < 0:
                raise TraceError(f"{path}: line {lineno}: negative day or window index")
            if window >= wpd:
                raise TraceError(
                    f"{path}: line {lineno}: window {window} outside 0..{wpd - 1}"
                )
            if nbytes < 0:
                raise TraceError(f"{path}: line {lineno}: negative volume {nbytes}")
            if user not in user_order:
                user_order[user] = len(user_order)
            records.append((user_order[user], day, window, nbytes))

    if not records:
        raise TraceError(f"{path}: no records")

    users = len(user_order)
    days = max(r[1] for r in records) + 1
    volume = np.zeros((users, days, wpd), dtype=np.int64)
    for u, d, w, b in records:
        volume[u, d, w] += b
    return TraceMatrix(volume=volume, window_length=float(window_length),
                       user_ids=tuple(user_order))


def write_trace(trace: TraceMatrix, path) -> None:
    """Serialize a trace to the CSV format load_trace reads (nonzero cells only)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        users, days, wpd = trace.volume.shape
        nz = np.argwhere(trace.volume > 0)
        for u, d, w in nz:
            writer.writerow([trace.user_ids[u], d, w, int(trace.volume[u, d, w])])


def generate_synthetic_trace(
    users: int,
    days: int,
    windows_per_day: int,
    diurnal_peak_hour: float = 20.0,
    peak_to_trough_ratio: float = 3.0,
    user_size_shape: float = 1.0,
    seed: int = 0,
    mean_daily_bytes: float = 1e8,
    day_noise: float = 0.15,
) -> TraceMatrix:
    """Synthesize a diurnal trace with heavy-tailed per-user volumes.

    The expected aggregate over a day follows a raised cosine with the
    requested peak hour and peak/trough ratio. Per-user daily totals are
    lognormal with sigma user_size_shape (a few large users dominate, like
    real eyeball populations). Deterministic for a fixed seed.
    """
    if users < 1 or days < 1:
        raise ValueError("users and days must both be >= 1")
    if peak_to_trough_ratio < 1.0:
        raise ValueError("peak_to_trough_ratio must be >= 1")
    if windows_per_day < 1:
        raise ValueError("windows_per_day must be >= 1")

    rng = np.random.default_rng(seed)
    amp = (peak_to_trough_ratio - 1.0) / (peak_to_trough_ratio + 1.0)
    peak_window = diurnal_peak_hour * windows_per_day / 24.0
    w = np.arange(windows_per_day)
    envelope = 1.0 + amp * np.cos((w - peak_window) * (2.0 * np.pi / windows_per_day))
    weights = envelope / envelope.sum()

    sigma = float(user_size_shape)
    user_scale = rng.lognormal(mean=math.log(mean_daily_bytes) - 0.5 * sigma**2,
                               sigma=sigma, size=users)
    if day_noise > 0:
        day_factor = rng.lognormal(mean=-0.5 * day_noise**2, sigma=day_noise,
                                   size=(users, days))
    else:
        day_factor = np.ones((users, days))
    # Gamma(4, 1/4) cell noise: mean 1, enough spread for realistic windows.
    cell_noise = rng.gamma(shape=4.0, scale=0.25, size=(users, days, windows_per_day))

    expected = user_scale[:, None, None] * day_factor[:, :, None] * weights[None, None, :]
    volume = np.rint(expected * cell_noise).astype(np.int64)
    return TraceMatrix(volume=volume, window_length=SECONDS_PER_DAY / windows_per_day)


def expected_diurnal_profile(windows_per_day: int, diurnal_peak_hour: float,
                             peak_to_trough_ratio: float) -> np.ndarray:
    """Closed-form expected aggregate share per window for the generator."""
    amp = (peak_to_trough_ratio - 1.0) / (peak_to_trough_ratio + 1.0)
    peak_window = diurnal_peak_hour * windows_per_day / 24.0
    w = np.arange(windows_per_day)
    envelope = 1.0 + amp * np.cos((w - peak_window) * (2.0 * np.pi / windows_per_day))
    return envelope / envelope.sum()


def split_by_tpg(trace: TraceMatrix, policy: TpgSplitPolicy) -> list:
    """Split a trace into one TraceMatrix per TPG, conserving every cell.

    Integer shares are rounded down and the leftover bytes credited to
    TPG 0, so the per-cell sum across groups equals the input exactly.
    """
    shares = policy.window_shares(trace.windows_per_day)  # (T, W)
    vol = trace.volume  # (U, D, W)
    raw = np.floor(shares[:, None, None, :] * vol[None, :, :, :]).astype(np.int64)
    remainder = vol - raw.sum(axis=0)
    raw[0] += remainder
    return [
        TraceMatrix(volume=raw[g], window_length=trace.window_length, user_ids=trace.user_ids)
        for g in range(policy.tpg_count)
    ]


def split_day_by_tpg(day_volume: np.ndarray, policy: TpgSplitPolicy) -> np.ndarray:
    """Split one day's (users, windows) float volumes by TPG, shape (T, U, W).

    Float path used inside the simulator; conserves totals to rounding.
    """
    shares = policy.window_shares(day_volume.shape[1])
    return shares[:, None, :] * day_volume[None, :, :]


def generate_extra_day(trace: TraceMatrix, seed: int) -> np.ndarray:
    """Draw one synthetic day, shape (users, windows_per_day), float bytes.

    A day total is drawn from a normal fitted to the trace's daily totals
    (clamped below at 10% of the mean so a wild draw cannot go nonpositive),
    each user copies one of their real days uniformly at random, and the
    whole day is scaled by a single constant to hit the drawn total. Each
    user's window vector is therefore a scalar multiple of a real day.
    """
    totals = trace.daily_totals()
    mean = float(totals.mean())
    if mean <= 0:
        raise TraceError("trace has zero total traffic; extra-day scale undefined")
    std = float(totals.std())

    rng = np.random.default_rng(seed)
    target = rng.normal(mean, std)
    target = max(target, 0.1 * mean)

    picks = rng.integers(0, trace.days, size=trace.users)
    day = trace.volume[np.arange(trace.users), picks, :].astype(np.float64)
    picked_total = day.sum()
    if picked_total <= 0:
        # Every sampled per-user day was empty; nothing to scale.
        return day
    return day * (target / picked_total)
