"""Disentangled uncertainty: corruption-probed epistemic variance and the
reconstruction + factor-variation aleatoric branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FactorFrame, MaskedSeries, TargetContext
from .errors import InsufficientSamples, InvalidScale, ShapeMismatch, WidthMismatch
from .factor_graph import affine
from .kernels import variation_stats

CONSISTENCY_FLOOR = 1e-3


@dataclass
class UncertaintyReport:
    """Per-region, per-step forecast with its uncertainty decomposition (natural units)."""

    y_hat: np.ndarray  # N x h
    u_e: np.ndarray  # N x h
    u_as: np.ndarray  # N x 1
    u_av: np.ndarray  # N x h
    region_ids: tuple = ()
    t0: int | None = None

    @property
    def u_a(self) -> np.ndarray:
        return self.u_as + self.u_av

    @property
    def lower(self) -> np.ndarray:
        return self.y_hat - self.u_a

    @property
    def upper(self) -> np.ndarray:
        return self.y_hat + self.u_a

    def cells(self) -> list:
        n, h = self.y_hat.shape
        rids = self.region_ids or tuple(str(i) for i in range(n))
        u_a, lo, hi = self.u_a, self.lower, self.upper
        return [
            {
                "region": rids[i],
                "step": s,
                "y_hat": float(self.y_hat[i, s]),
                "u_e": float(self.u_e[i, s]),
                "u_as": float(self.u_as[i, 0]),
                "u_av": float(self.u_av[i, s]),
                "u_a": float(u_a[i, s]),
                "lower": float(lo[i, s]),
                "upper": float(hi[i, s]),
            }
            for i in range(n)
            for s in range(h)
        ]

    def to_json(self) -> dict:
        return {
            "t0": self.t0,
            "mean_u_e": float(self.u_e.mean()),
            "mean_u_a": float(self.u_a.mean()),
            "cells": self.cells(),
        }


# ---------------------------------------------------------------------------
# epistemic

def corrupt(x_p, x_h, n_copies: int, rho: float, seed: int, sigma: float = 1.0):
    """``n_copies`` Gaussian-perturbed copies of both windows, stacked on axis 0."""
    if rho <= 0:
        raise InvalidScale(f"corruption scale must be positive, got {rho}")
    x_p = np.asarray(x_p, dtype=np.float64)
    x_h = np.asarray(x_h, dtype=np.float64)
    rng = np.random.default_rng(seed)
    scale = rho * sigma
    eps_p = rng.normal(0.0, scale, size=(n_copies,) + x_p.shape)
    eps_h = rng.normal(0.0, scale, size=(n_copies,) + x_h.shape)
    return x_p[None] + eps_p, x_h[None] + eps_h


def epistemic(predict: Callable, x_p, x_h, n_copies: int = 10, rho: float = 0.01, seed: int = 0,
              sigma: float = 1.0) -> np.ndarray:
    """Per-cell population variance of forecasts over corrupted inputs.

    ``predict`` maps stacked inputs (J, ..., N, h) to stacked forecasts and is
    evaluated with recording suspended.
    """
    if n_copies < 2:
        raise InsufficientSamples(f"need at least 2 corrupted copies, got {n_copies}")
    cp, ch = corrupt(x_p, x_h, n_copies, rho, seed, sigma)
    with ad.no_grad():
        preds = predict(cp, ch)
    preds = np.asarray(preds.data if isinstance(preds, Tensor) else preds, dtype=np.float64)
    return np.var(preds, axis=0)


# ---------------------------------------------------------------------------
# aleatoric

def recon_uncertainty(x_h, x_hat) -> Tensor:
    """Mean squared reconstruction residual per node, shape (..., N, 1)."""
    x_h, x_hat = ad._as_tensor(x_h), ad._as_tensor(x_hat)
    if x_h.shape != x_hat.shape:
        raise ShapeMismatch(f"{x_h.shape} vs {x_hat.shape}")
    return ad.mean(ad.square(ad.sub(x_h, x_hat)), axis=-1, keepdims=True)


def _cell_triple(frame: FactorFrame, i: int, t: int, ctx: TargetContext | None):
    if ctx is not None and ctx.t0 <= t < ctx.t0 + ctx.horizon:
        s = t - ctx.t0
        return int(ctx.day_of_week[s]), int(ctx.daily_slot[s]), int(ctx.weather_type[i, s])
    return int(frame.day_of_week(t)), int(frame.daily_slot(t)), int(frame.weather_type[i, t])


def build_variation_set(i: int, t: int, series: MaskedSeries, frame: FactorFrame,
                        pi_q: int = 4, ctx: TargetContext | None = None,
                        limit: int | None = None) -> np.ndarray:
    """Most recent observed values of region ``i`` sharing (dow, slot, weather) with ``t``.

    Only ``t_q < min(t, limit)`` is searched. Calendar fields repeat weekly,
    so the candidates are ``t - week * j``. Newest member first.
    """
    dow, slot, weather = _cell_triple(frame, i, t, ctx)
    stop = t if limit is None else min(t, limit)
    week = 7 * frame.intervals_per_day
    members = []
    tq = t - week
    while tq >= 0 and len(members) < pi_q:
        if (tq < stop and series.observed_mask[i, tq] and frame.weather_type[i, tq] == weather
                and frame.day_of_week(tq) == dow and frame.daily_slot(tq) == slot):
            members.append(series.values[i, tq])
        tq -= week
    return np.asarray(members, dtype=np.float64)


def variation_label(members) -> float:
    """Population standard deviation; 0 for sets of size <= 1."""
    d = np.asarray(members, dtype=np.float64)
    if d.size <= 1:
        return 0.0
    return float(np.std(d))


def variation_labels(series: MaskedSeries, frame: FactorFrame, ctx: TargetContext,
                     pi_q: int = 4, limit: int | None = None) -> np.ndarray:
    """(N, h) labels for every cell of one target, via the compiled scan."""
    h = ctx.horizon
    cell_t = np.arange(ctx.t0, ctx.t0 + h)
    lim = np.full(h, ctx.t0 if limit is None else limit)
    t_len = series.n_intervals
    cal = np.arange(t_len)
    std, _ = variation_stats(
        np.nan_to_num(series.values), series.observed_mask, frame.day_of_week(cal),
        frame.daily_slot(cal), frame.weather_type[:, :t_len], cell_t, ctx.day_of_week,
        ctx.daily_slot, ctx.weather_type, lim, pi_q,
    )
    return std


def variation_head(c, weight: Tensor, bias: Tensor) -> Tensor:
    """ReLU of an affine map of the full factor vector; (..., width) -> (...)."""
    c = ad._as_tensor(c)
    if weight.ndim != 2 or c.shape[-1] != weight.shape[0]:
        raise WidthMismatch(f"factor width {c.shape[-1]} vs head width {weight.shape}")
    out = ad.relu(affine(c, weight, bias))
    return ad.reshape(out, c.shape[:-1])


def variation_loss(label, estimate) -> Tensor:
    return ad.mean(ad.square(ad.sub(label, estimate)))


def consistency_loss(y, y_hat, u_as, u_av, floor: float = CONSISTENCY_FLOOR) -> Tensor:
    """Mean of squared residual over the squared (floored) total aleatoric width."""
    y, y_hat = ad._as_tensor(y), ad._as_tensor(y_hat)
    u_as, u_av = ad._as_tensor(u_as), ad._as_tensor(u_av)
    if u_as.shape != u_av.shape:
        u_as = ad.broadcast_to(u_as, u_av.shape)
    width = ad.clamp_min(ad.add(u_as, u_av), floor)
    return ad.mean(ad.div(ad.square(ad.sub(y, y_hat)), ad.square(width)))
