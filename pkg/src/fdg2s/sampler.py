"""Semantic-neighboring retrieval of the periodic and instantaneous windows.

Indices are 0-based. A target starting at ``t_ref`` may only use history in
``[0, t_ref)``; a window "ending at k" covers ``[k - h, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FactorFrame, MaskedSeries, Scenario, TargetContext, apply_scenario
from .errors import BatchSampleErrors, DomainError, SampleNotFound

DEFAULT_EPSILON = 3


@dataclass
class RetrievedWindows:
    t_ref: int
    k_p: int
    k_h: int
    x_p: np.ndarray  # N x h
    x_h: np.ndarray  # N x h
    context: TargetContext
    scenario: str = ""


@dataclass
class BatchResult:
    windows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (position, t_ref, message)

    def __len__(self) -> int:
        return len(self.windows)


def circular_slot_distance(a, b, intervals_per_day: int):
    d = np.abs(np.asarray(a) - np.asarray(b)) % intervals_per_day
    return np.minimum(d, intervals_per_day - d)


def window_ok(mask: np.ndarray, h: int) -> np.ndarray:
    """ok[k] is True iff ``[k - h, k)`` is fully observed; length T + 1."""
    col = mask.all(axis=0).astype(np.int64)
    cs = np.concatenate([[0], np.cumsum(col)])
    ok = np.zeros(cs.size, dtype=bool)
    ok[h:] = (cs[h:] - cs[:-h]) == h
    return ok


def sample_periodic(series: MaskedSeries, factors: FactorFrame, t_ref: int, h: int) -> int:
    """Largest week-aligned k with ``[k-h, k)`` observed, matching dow/slot of ``t_ref - 1``.

    Day-of-week and slot jointly repeat every ``7 * T_d`` intervals, so the
    candidates form that stride sequence below ``t_ref - 1``.
    """
    week = 7 * series.intervals_per_day
    anchor = t_ref - 1
    k = anchor - week
    while k - h >= 0:
        if series.is_observed(k - h, k):
            return k
        k -= week
    raise SampleNotFound(f"no fully observed periodic window for target {t_ref}")


def sample_instantaneous(series: MaskedSeries, factors: FactorFrame, t_ref: int, h: int,
                         expected_weather: int, epsilon: int = DEFAULT_EPSILON) -> int:
    """Largest k < t_ref sharing dow(t_ref-1) and the expected weather, slot within epsilon."""
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    if t_ref <= h:
        raise SampleNotFound(f"history too short for target {t_ref}")
    # targets may lie past the end of history; candidates need recorded weather
    stop = min(t_ref, series.n_intervals, factors.n_intervals)
    ks = np.arange(stop)
    td = series.intervals_per_day
    cand = (
        (factors.day_of_week(ks) == factors.day_of_week(t_ref - 1))
        & (factors.city_weather_all()[:stop] == expected_weather)
        & (circular_slot_distance(factors.daily_slot(ks), factors.daily_slot(t_ref), td) < epsilon)
        & window_ok(series.observed_mask, h)[:stop]
    )
    hits = np.flatnonzero(cand)
    if hits.size == 0:
        raise SampleNotFound(
            f"no fully observed instantaneous window for target {t_ref} (weather {expected_weather})"
        )
    return int(hits[-1])


def retrieve(series: MaskedSeries, factors: FactorFrame, t_ref: int, context: TargetContext,
             h: int, epsilon: int = DEFAULT_EPSILON, scenario: str = "") -> RetrievedWindows:
    k_p = sample_periodic(series, factors, t_ref, h)
    k_h = sample_instantaneous(series, factors, t_ref, h, context.city_weather, epsilon)
    return RetrievedWindows(t_ref, k_p, k_h, series.window(k_p - h, k_p).copy(),
                            series.window(k_h - h, k_h).copy(), context, scenario)


def build_batch(series: MaskedSeries, factors: FactorFrame, targets: Sequence, h: int,
                epsilon: int = DEFAULT_EPSILON, scenario: Scenario | None = None,
                strict: bool = False) -> BatchResult:
    """Retrieve windows for each ``(t_ref, context)`` target.

    ``context`` may be ``None`` to use the observed factors. When ``scenario``
    is given its gap is masked relative to each target before retrieval.
    Failed targets are collected in ``BatchResult.failures``; ``strict``
    turns them into a single :class:`BatchSampleErrors`.
    """
    out = BatchResult()
    for pos, target in enumerate(targets):
        t_ref, ctx = target if isinstance(target, tuple) else (target, None)
        try:
            if ctx is None:
                ctx = factors.context(t_ref, h)
            view = series
            label = ""
            if scenario is not None:
                view = apply_scenario(series, scenario.at(t_ref))
                label = scenario.label
            out.windows.append(retrieve(view, factors, t_ref, ctx, h, epsilon, label))
        except DomainError as exc:
            out.failures.append((pos, t_ref, f"{exc.code}: {exc}"))
    if strict and out.failures:
        raise BatchSampleErrors(out.failures)
    return out
