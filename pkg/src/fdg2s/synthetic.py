"""Seeded synthetic city with planted calendar, weather and regional effects.

value(i, t) = base_i * drift_i(day) * weekly_profile(dow, slot) * weather_mult(w(t)) * (1 + noise)

Every planted quantity is returned in :class:`GroundTruthParams` so tests can
build exact oracles from the generator's own parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np

from .data import FactorFrame, Graph, MaskedSeries
from .errors import InvalidConfig


@dataclass
class SynthConfig:
    n_regions: int = 20
    days: int = 60
    intervals_per_day: int = 24
    weather_probs: tuple = (0.6, 0.3, 0.1)
    weather_multipliers: tuple = (1.0, 0.7, 0.5)
    amplitude_range: tuple = (50.0, 150.0)
    noise_sigma: float = 0.05
    # innovation scale of the daily log level; 0 disables the drift
    drift_sigma: float = 0.08
    # daily AR(1) coefficient of the log level; 1.0 gives a random walk
    drift_phi: float = 0.8
    # "city" shares one level path across regions, "region" draws one per region
    drift_scope: str = "city"
    weather_block_hours: float = 6.0
    start: str = "2017-01-02T00:00:00"  # a Monday
    embedding_dim: int = 8
    knn: int = 3

    def validate(self) -> None:
        if min(self.n_regions, self.days, self.intervals_per_day) <= 0:
            raise InvalidConfig("sizes must be positive")
        if 1440 % self.intervals_per_day:
            raise InvalidConfig("intervals_per_day must divide 1440 minutes")
        probs = np.asarray(self.weather_probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidConfig("weather probabilities must be nonnegative and sum to 1")
        if len(self.weather_multipliers) != probs.size:
            raise InvalidConfig("one weather multiplier per weather type is required")
        if any(m <= 0 for m in self.weather_multipliers):
            raise InvalidConfig("weather multipliers must be positive")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise InvalidConfig("amplitude range must satisfy 0 < lo <= hi")
        if self.drift_scope not in ("city", "region"):
            raise InvalidConfig(f"unknown drift scope {self.drift_scope!r}")
        if not 0.0 <= self.drift_phi <= 1.0:
            raise InvalidConfig("drift_phi must lie in [0, 1]")
        if self.noise_sigma < 0 or self.drift_sigma < 0 or self.weather_block_hours <= 0:
            raise InvalidConfig("noise, drift and block length must be nonnegative/positive")


@dataclass
class GroundTruthParams:
    base: np.ndarray  # (N,)
    weekly_profile: np.ndarray  # (7, T_d)
    weather_multipliers: np.ndarray  # (W,)
    weather: np.ndarray  # (T,) city-wide weather type per interval
    drift: np.ndarray  # (N, days)
    noise_sigma: float
    config: dict = field(default_factory=dict)

    def expected(self, i: int, t: int, dow: int, slot: int) -> float:
        td = self.weekly_profile.shape[1]
        return float(self.base[i] * self.drift[i, t // td] * self.weekly_profile[dow, slot]
                     * self.weather_multipliers[self.weather[t]])

    def to_json(self) -> dict:
        return {
            "base": self.base.tolist(),
            "weekly_profile": self.weekly_profile.tolist(),
            "weather_multipliers": self.weather_multipliers.tolist(),
            "weather": self.weather.tolist(),
            "drift": self.drift.tolist(),
            "noise_sigma": self.noise_sigma,
            "config": self.config,
        }


def weekly_profile(intervals_per_day: int) -> np.ndarray:
    """Commuter-style daily shape: morning and evening peaks, damped weekends."""
    hours = (np.arange(intervals_per_day) + 0.5) * 24.0 / intervals_per_day
    morning = np.exp(-0.5 * ((hours - 8.5) / 1.5) ** 2)
    evening = np.exp(-0.5 * ((hours - 18.0) / 2.0) ** 2)
    midday = np.exp(-0.5 * ((hours - 13.0) / 3.0) ** 2)
    weekday = 0.35 + 1.0 * morning + 0.9 * evening + 0.3 * midday
    weekend = 0.35 + 0.7 * midday + 0.2 * evening
    prof = np.empty((7, intervals_per_day))
    for d in range(7):
        prof[d] = weekend if d >= 5 else weekday * (1.0 + 0.04 * d)
    return prof


def generate_synthetic(config: SynthConfig | None = None, seed: int = 0):
    """Returns (MaskedSeries, FactorFrame, Graph, GroundTruthParams)."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, td, days = cfg.n_regions, cfg.intervals_per_day, cfg.days
    t_len = td * days
    start = datetime.fromisoformat(cfg.start)
    minutes = 1440 // td
    slot0 = (start.hour * 60 + start.minute) // minutes
    dow0 = start.weekday()

    base = rng.uniform(*cfg.amplitude_range, size=n)
    profile = weekly_profile(td)
    probs = np.asarray(cfg.weather_probs, dtype=float)
    mults = np.asarray(cfg.weather_multipliers, dtype=float)

    block = max(1, int(round(cfg.weather_block_hours * 60 / minutes)))
    n_blocks = -(-t_len // block)
    weather = np.repeat(rng.choice(probs.size, size=n_blocks, p=probs), block)[:t_len]

    if cfg.drift_sigma > 0:
        paths = n if cfg.drift_scope == "region" else 1
        steps = rng.normal(0.0, cfg.drift_sigma, size=(paths, days))
        phi = cfg.drift_phi
        log_level = np.zeros((paths, days))
        if phi < 1.0:
            log_level[:, 0] = steps[:, 0] / np.sqrt(1.0 - phi * phi)
        for d in range(1, days):
            log_level[:, d] = phi * log_level[:, d - 1] + steps[:, d]
        drift = np.broadcast_to(np.exp(log_level), (n, days)).copy()
    else:
        drift = np.ones((n, days))

    t = np.arange(t_len)
    slots = (slot0 + t) % td
    dows = (dow0 + (slot0 + t) // td) % 7
    mean = (base[:, None] * np.repeat(drift, td, axis=1)[:, :t_len]
            * profile[dows, slots][None, :] * mults[weather][None, :])
    noise = rng.normal(0.0, cfg.noise_sigma, size=(n, t_len)) if cfg.noise_sigma > 0 \
        else np.zeros((n, t_len))
    values = mean * (1.0 + noise)
    series = MaskedSeries(values, np.ones_like(values, dtype=bool), minutes, td, start,
                          tuple(f"r{i}" for i in range(n)))

    hours = (slots + 0.5) * 24.0 / td
    temp = 10.0 + 5.0 * np.sin(2 * np.pi * (hours - 9.0) / 24.0) - 2.0 * (weather > 0)
    temp = temp[None, :] + rng.normal(0.0, 0.5, size=(n, t_len))
    precip_level = np.linspace(0.0, 6.0, probs.size)[weather]
    precip = precip_level[None, :] * (1.0 + 0.2 * rng.random((n, t_len)))
    numeric = np.stack([temp, precip], axis=2)
    emb = rng.normal(0.0, 0.1, size=(n, cfg.embedding_dim))
    frame = FactorFrame(td, dow0, slot0, np.broadcast_to(weather, (n, t_len)).copy(), numeric,
                        probs.size, location_embedding=emb)

    coords = rng.random((n, 2))
    edges = []
    dist = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
    for i in range(n):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i][: cfg.knn]
        for j in order:
            edges.append((i, int(j), float(np.exp(-dist[i, j] ** 2 / 0.1))))
    graph = Graph(n, tuple(edges), coords)

    truth = GroundTruthParams(base, profile, mults, weather, drift, cfg.noise_sigma,
                              {k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in asdict(cfg).items()})
    return series, frame, graph, truth
