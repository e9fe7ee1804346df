"""Core data model: masked observation matrices, exogenous factors, scenarios."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .errors import (
    GapOutOfBounds,
    GapSpanViolation,
    IndexOutOfRange,
    InvalidConfig,
    ShapeMismatch,
)

FACTOR_TYPES = ("dow", "slot", "weather", "numeric", "location")
DEFAULT_LOCATION_DIM = 8
NUMERIC_BINS = 4


@dataclass(frozen=True, eq=False)
class MaskedSeries:
    """N regions x T intervals with an observed mask.

    Masked cells are stored as NaN so that an accidental read poisons every
    downstream result instead of silently leaking hidden data.
    """

    values: np.ndarray
    observed_mask: np.ndarray
    interval_minutes: int
    intervals_per_day: int
    start: datetime | None = None
    region_ids: tuple = ()

    def __post_init__(self):
        mask = np.asarray(self.observed_mask, dtype=bool)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or mask.shape != vals.shape:
            raise ShapeMismatch(f"values {vals.shape} and mask {mask.shape} must be equal N x T")
        if self.interval_minutes <= 0 or self.intervals_per_day <= 0:
            raise InvalidConfig("interval width and intervals per day must be positive")
        if vals.shape[1] % self.intervals_per_day:
            raise InvalidConfig(
                f"T={vals.shape[1]} is not a multiple of T_d={self.intervals_per_day}"
            )
        mask = mask & np.isfinite(vals)
        vals[~mask] = np.nan
        vals.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "observed_mask", mask)
        if not self.region_ids:
            object.__setattr__(self, "region_ids", tuple(str(i) for i in range(vals.shape[0])))

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.values.shape[1]

    @property
    def n_days(self) -> int:
        return self.n_intervals // self.intervals_per_day

    def is_observed(self, start: int, stop: int) -> bool:
        """True iff every cell of every region in ``[start, stop)`` is observed."""
        if start < 0 or stop > self.n_intervals or start >= stop:
            return False
        return bool(self.observed_mask[:, start:stop].all())

    def window(self, start: int, stop: int) -> np.ndarray:
        if not self.is_observed(start, stop):
            raise IndexOutOfRange(f"window [{start}, {stop}) is not fully observed")
        return self.values[:, start:stop]

    def observed_values(self) -> np.ndarray:
        return self.values[self.observed_mask]

    def with_mask(self, mask: np.ndarray) -> "MaskedSeries":
        return MaskedSeries(self.values, mask, self.interval_minutes, self.intervals_per_day,
                            self.start, self.region_ids)

    def truncate(self, stop: int) -> "MaskedSeries":
        return MaskedSeries(self.values[:, :stop], self.observed_mask[:, :stop],
                            self.interval_minutes, self.intervals_per_day,
                            self.start, self.region_ids)

    def timestamp(self, t: int) -> datetime:
        base = self.start or datetime(1970, 1, 5)
        return base + timedelta(minutes=self.interval_minutes * int(t))


@dataclass(eq=False)
class FactorFrame:
    """Per-(region, interval) exogenous factors plus encoders.

    Calendar fields are derived arithmetically so they extend past the end of
    the observed history; weather must be supplied for future intervals.
    """

    intervals_per_day: int
    first_dow: int
    first_slot: int
    weather_type: np.ndarray  # N x T, int
    numeric_raw: np.ndarray  # N x T x d_nw
    n_weather_types: int
    numeric_mean: np.ndarray = None
    numeric_std: np.ndarray = None
    location_embedding: np.ndarray = None
    numeric_names: tuple = ("temp", "precip")

    def __post_init__(self):
        self.weather_type = np.asarray(self.weather_type, dtype=np.int64)
        raw = np.asarray(self.numeric_raw, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[:, :, None]
        self.numeric_raw = raw
        if self.weather_type.shape != raw.shape[:2]:
            raise ShapeMismatch("weather_type and numeric weather disagree on N x T")
        if self.weather_type.size and (
            self.weather_type.min() < 0 or self.weather_type.max() >= self.n_weather_types
        ):
            raise InvalidConfig("weather type outside [0, W)")
        if self.numeric_mean is None:
            flat = raw.reshape(-1, raw.shape[2])
            self.numeric_mean = flat.mean(axis=0)
            std = flat.std(axis=0)
            self.numeric_std = np.where(std > 0, std, 1.0)
        if self.location_embedding is None:
            self.location_embedding = np.zeros((self.n_regions, DEFAULT_LOCATION_DIM))

    @property
    def n_regions(self) -> int:
        return self.weather_type.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.weather_type.shape[1]

    @property
    def numeric_dim(self) -> int:
        return self.numeric_raw.shape[2]

    @property
    def location_dim(self) -> int:
        return self.location_embedding.shape[1]

    @property
    def numeric_weather(self) -> np.ndarray:
        return self.zscore(self.numeric_raw)

    def zscore(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.numeric_mean) / self.numeric_std

    # calendar -------------------------------------------------------------
    def daily_slot(self, t):
        return (self.first_slot + np.asarray(t)) % self.intervals_per_day

    def day_of_week(self, t):
        days = (self.first_slot + np.asarray(t)) // self.intervals_per_day
        return (self.first_dow + days) % 7

    # factor encoding ------------------------------------------------------
    def segment_widths(self) -> dict:
        return {
            "dow": 7,
            "slot": 3,
            "weather": self.n_weather_types,
            "numeric": self.numeric_dim,
            "location": self.location_dim,
        }

    def segments(self) -> dict:
        """Name -> slice into the full factor vector."""
        out, pos = {}, 0
        for name, width in self.segment_widths().items():
            out[name] = slice(pos, pos + width)
            pos += width
        return out

    @property
    def width(self) -> int:
        return sum(self.segment_widths().values())

    def context(self, t0: int, h: int) -> "TargetContext":
        """Observed factors of the h steps starting at ``t0`` (all inside the frame)."""
        if t0 < 0 or t0 + h > self.n_intervals:
            raise IndexOutOfRange(f"steps [{t0}, {t0 + h}) outside the factor frame")
        return TargetContext(
            t0=t0,
            day_of_week=self.day_of_week(np.arange(t0, t0 + h)),
            daily_slot=self.daily_slot(np.arange(t0, t0 + h)),
            weather_type=self.weather_type[:, t0:t0 + h].copy(),
            numeric_z=self.numeric_weather[:, t0:t0 + h],
        )

    def expected_context(self, t0: int, weather_type, numeric_raw) -> "TargetContext":
        """Context for user-supplied expected weather (future steps allowed)."""
        w = np.asarray(weather_type, dtype=np.int64)
        raw = np.asarray(numeric_raw, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[:, :, None]
        if w.ndim != 2 or w.shape[0] != self.n_regions or raw.shape[:2] != w.shape:
            raise ShapeMismatch("expected weather must be N x h (numeric N x h x d_nw)")
        if raw.shape[2] != self.numeric_dim:
            raise ShapeMismatch("expected numeric weather width differs from history")
        if w.min() < 0 or w.max() >= self.n_weather_types:
            raise InvalidConfig("expected weather type outside [0, W)")
        h = w.shape[1]
        steps = np.arange(t0, t0 + h)
        return TargetContext(t0, self.day_of_week(steps), self.daily_slot(steps), w,
                             self.zscore(raw))

    def city_weather(self, t):
        """Modal weather type across regions (ties -> smallest type id)."""
        modes = mode_rows(self.weather_type[:, np.atleast_1d(t)].T)
        return int(modes[0]) if np.ndim(t) == 0 else modes

    def city_weather_all(self) -> np.ndarray:
        cached = getattr(self, "_city_weather", None)
        if cached is None or len(cached) != self.n_intervals:
            cached = mode_rows(self.weather_type.T)
            self._city_weather = cached
        return cached


def mode_rows(a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.int64))
    out = np.empty(a.shape[0], dtype=np.int64)
    for r, row in enumerate(a):
        out[r] = int(np.argmax(np.bincount(row)))
    return out


@dataclass
class TargetContext:
    """Factors of the h steps of one forecasting target."""

    t0: int
    day_of_week: np.ndarray  # (h,)
    daily_slot: np.ndarray  # (h,)
    weather_type: np.ndarray  # (N, h)
    numeric_z: np.ndarray  # (N, h, d_nw)

    @property
    def horizon(self) -> int:
        return len(self.daily_slot)

    @property
    def city_weather(self) -> int:
        return int(mode_rows(self.weather_type[:, :1].T)[0])


def encode_static(frame: FactorFrame, ctx: TargetContext) -> np.ndarray:
    """Factor vectors minus the trainable location part: (N, h, width - d_l)."""
    n, h = ctx.weather_type.shape
    td = frame.intervals_per_day
    dow = np.zeros((h, 7))
    dow[np.arange(h), ctx.day_of_week] = 1.0
    angle = 2.0 * np.pi * ctx.daily_slot / td
    slot = np.stack([ctx.daily_slot / td, np.sin(angle), np.cos(angle)], axis=1)
    weather = np.zeros((n, h, frame.n_weather_types))
    weather[np.arange(n)[:, None], np.arange(h)[None, :], ctx.weather_type] = 1.0
    cal = np.concatenate([dow, slot], axis=1)
    return np.concatenate(
        [np.broadcast_to(cal, (n, h, 10)), weather, ctx.numeric_z], axis=2
    )


def encode_factors(frame: FactorFrame, i: int, t: int, embedding: np.ndarray | None = None,
                   ctx: TargetContext | None = None):
    """Factor vector c(i, t) and its per-type segments.

    ``ctx`` supplies expected factors when ``t`` lies beyond the frame.
    """
    if not 0 <= i < frame.n_regions:
        raise IndexOutOfRange(f"region {i} outside [0, {frame.n_regions})")
    if ctx is None:
        if not 0 <= t < frame.n_intervals:
            raise IndexOutOfRange(f"interval {t} outside [0, {frame.n_intervals})")
        ctx = frame.context(t, 1)
        step = 0
    else:
        step = t - ctx.t0
        if not 0 <= step < ctx.horizon:
            raise IndexOutOfRange(f"interval {t} not covered by the expected factors")
    emb = frame.location_embedding if embedding is None else np.asarray(embedding)
    vec = np.concatenate([encode_static(frame, ctx)[i, step], emb[i]])
    segs = {name: vec[s] for name, s in frame.segments().items()}
    return vec, segs


# ---------------------------------------------------------------------------
# graph and scenarios

@dataclass(frozen=True)
class Graph:
    n_nodes: int
    edges: tuple  # ((src, dst, weight), ...)
    coordinates: np.ndarray | None = None

    def __post_init__(self):
        for s, d, w in self.edges:
            if s == d:
                raise InvalidConfig("self-loops are not allowed")
            if w < 0:
                raise InvalidConfig("edge weights must be nonnegative")
            if not (0 <= s < self.n_nodes and 0 <= d < self.n_nodes):
                raise InvalidConfig(f"edge ({s}, {d}) outside [0, {self.n_nodes})")

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for s, d, w in self.edges:
            a[s, d] = w
        return a


NEAREST_OBSERVED_DAYS = 3
MAX_GAP_DAYS = 30


@dataclass(frozen=True)
class Scenario:
    """EarlyPlanning(p days ahead) or SensorFailure(q days missing)."""

    kind: str  # "early" | "failure"
    days: int
    target_start: int = 0
    horizon: int = 6

    def __post_init__(self):
        if self.kind not in ("early", "failure"):
            raise InvalidConfig(f"unknown scenario kind {self.kind!r}")

    @classmethod
    def early_planning(cls, p: int, target_start: int = 0, horizon: int = 6) -> "Scenario":
        return cls("early", p, target_start, horizon)

    @classmethod
    def sensor_failure(cls, q: int, target_start: int = 0, horizon: int = 6) -> "Scenario":
        return cls("failure", q, target_start, horizon)

    @classmethod
    def parse(cls, text: str, horizon: int = 6) -> "Scenario":
        """'early:7' / 'failure:3' (also 'EarlyPlanning(7)', 'SensorFailure(3)')."""
        s = text.strip()
        for prefix, kind in (("earlyplanning", "early"), ("sensorfailure", "failure"),
                             ("early", "early"), ("failure", "failure")):
            if s.lower().startswith(prefix):
                rest = s[len(prefix):].strip("():= ")
                try:
                    return cls(kind, int(rest), 0, horizon)
                except ValueError:
                    break
        raise InvalidConfig(f"cannot parse scenario {text!r}")

    @property
    def label(self) -> str:
        return f"{'EarlyPlanning' if self.kind == 'early' else 'SensorFailure'}({self.days})"

    def at(self, target_start: int) -> "Scenario":
        return Scenario(self.kind, self.days, target_start, self.horizon)

    def gap(self, intervals_per_day: int) -> tuple:
        """Masked half-open interval range ``(start, stop)``."""
        td = intervals_per_day
        if not 1 <= self.days <= MAX_GAP_DAYS:
            raise GapSpanViolation(
                f"gap of {self.days} day(s) outside [1, {MAX_GAP_DAYS}] days"
            )
        t0 = self.target_start
        if self.kind == "early":
            return t0 - self.days * td, t0
        stop = t0 - NEAREST_OBSERVED_DAYS * td
        return stop - self.days * td, stop


def apply_scenario(series: MaskedSeries, scenario: Scenario) -> MaskedSeries:
    start, stop = scenario.gap(series.intervals_per_day)
    if start < 0 or scenario.target_start > series.n_intervals:
        raise GapOutOfBounds(
            f"gap [{start}, {stop}) for target {scenario.target_start} does not fit the series"
        )
    mask = series.observed_mask.copy()
    mask[:, start:stop] = False
    return series.with_mask(mask)


def scenario_mask(mask: np.ndarray, scenario: Scenario, intervals_per_day: int) -> np.ndarray:
    """Mask-only variant used in hot loops (same rules as :func:`apply_scenario`)."""
    start, stop = scenario.gap(intervals_per_day)
    if start < 0 or scenario.target_start > mask.shape[1]:
        raise GapOutOfBounds(f"gap [{start}, {stop}) does not fit the series")
    out = mask.copy()
    out[:, start:stop] = False
    return out


def chronological_split(n_intervals: int, intervals_per_day: int,
                        fractions: Sequence[float] = (0.6, 0.1, 0.3)) -> tuple:
    """Day-aligned (train_end, val_end) boundaries of a 60/10/30 split."""
    days = n_intervals // intervals_per_day
    train_days = int(round(days * fractions[0]))
    val_days = int(round(days * (fractions[0] + fractions[1])))
    return train_days * intervals_per_day, val_days * intervals_per_day


@dataclass
class Dataset:
    """Everything a run needs: observations, factors, graph and provenance."""

    series: MaskedSeries
    factors: FactorFrame
    graph: Graph | None = None
    meta: dict = field(default_factory=dict)
