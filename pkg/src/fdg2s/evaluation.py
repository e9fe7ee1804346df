"""Interval metrics, naive baselines and the scenario evaluation harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FactorFrame, MaskedSeries, Scenario, apply_scenario, chronological_split
from .errors import NegativeWidth, NoHistoricalMatch, ShapeMismatch
from .factor_graph import AdjacencyBank
from .sampler import build_batch
from .trainer import enumerate_targets, mape_loss

BASELINES = ("historical_average", "seasonal_naive")
ROW_FIELDS = ("scenario", "model", "mape", "picp", "up", "n_targets", "n_skipped")
RESIDUAL_FIELDS = ("scenario", "model", "t0", "region", "step", "y", "y_hat", "u_a")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"shapes differ: {sorted(shapes)}")


def picp(y, y_hat, u_a) -> float:
    """Fraction of cells with ``y`` inside the closed interval ``y_hat -/+ u_a``."""
    y, y_hat, u_a = (np.asarray(a, dtype=np.float64) for a in (y, y_hat, u_a))
    _same_shape(y, y_hat, u_a)
    if np.any(u_a < 0):
        raise NegativeWidth("interval half-width must be nonnegative")
    covered = (y >= y_hat - u_a) & (y <= y_hat + u_a)
    return float(np.mean(covered))


def up(y, u_a, floor: float = 1.0) -> float:
    """Mean half-width relative to the (floored) ground truth."""
    y, u_a = np.asarray(y, dtype=np.float64), np.asarray(u_a, dtype=np.float64)
    _same_shape(y, u_a)
    return float(np.mean(u_a / np.maximum(np.abs(y), floor)))


def baseline_forecast(kind: str, series: MaskedSeries, frame: FactorFrame, t0: int,
                      h: int) -> np.ndarray:
    """N x h forecast from observed history before ``t0``.

    Day-of-week and slot repeat together every week, so cells sharing both
    with step ``t`` are exactly ``t - week * j``.
    """
    week = 7 * series.intervals_per_day
    n = series.n_regions
    out = np.empty((n, h))
    for s in range(h):
        t = t0 + s
        cand = t - week * np.arange(1, t // week + 1)
        cand = cand[cand < t0]
        if kind == "historical_average":
            for i in range(n):
                obs = cand[series.observed_mask[i, cand]]
                if obs.size == 0:
                    raise NoHistoricalMatch(f"no observed history for region {i}, step {s}")
                out[i, s] = series.values[i, obs].mean()
        elif kind == "seasonal_naive":
            for i in range(n):
                obs = cand[series.observed_mask[i, cand]]
                if obs.size == 0:
                    raise NoHistoricalMatch(f"no observed history for region {i}, step {s}")
                out[i, s] = series.values[i, obs[0]]
        else:
            raise ValueError(f"unknown baseline {kind!r}")
    return out


@dataclass
class EvalResult:
    rows: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    def row(self, scenario: str, model: str) -> dict:
        for r in self.rows:
            if r["scenario"] == scenario and r["model"] == model:
                return r
        raise KeyError((scenario, model))

    def write(self, metrics_path, residuals_path=None) -> None:
        _write_csv(metrics_path, ROW_FIELDS, self.rows)
        if residuals_path is not None:
            _write_csv(residuals_path, RESIDUAL_FIELDS, self.residuals)


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ""
    return "" if v is None else v


def _write_csv(path, fields, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


class ModelPredictor:
    """Adapter giving the harness forecasts and aleatoric widths from a trained model."""

    name = "fdg2s"

    def __init__(self, model, bank: AdjacencyBank, pi_q: int = 4):
        self.model, self.bank, self.pi_q = model, bank, pi_q

    def __call__(self, windows, series, frame):
        batch = self.model.prepare(windows, frame, self.bank, series, self.pi_q, targets=False)
        pred = self.model.predict(batch)
        u_a = pred["u_as"] + pred["u_av"]
        return pred["y_hat"], u_a


class OraclePredictor:
    """Emits the ground truth with zero width; a fixture for the harness."""

    name = "oracle"

    def __init__(self, truth: MaskedSeries):
        self.truth = truth

    def __call__(self, windows, series, frame):
        h = windows[0].x_p.shape[1]
        y = np.stack([self.truth.values[:, w.t_ref:w.t_ref + h] for w in windows])
        return y, np.zeros_like(y)


def evaluation_targets(series: MaskedSeries, h: int, split=(0.6, 0.1, 0.3)) -> list:
    """Non-overlapping, fully observed h-windows of the test split."""
    _, val_end = chronological_split(series.n_intervals, series.intervals_per_day, split)
    return enumerate_targets(series, val_end, series.n_intervals, h, h)


def evaluate(predictor, series: MaskedSeries, frame: FactorFrame, scenarios, h: int = 6,
             epsilon: int = 3, split=(0.6, 0.1, 0.3), baselines=BASELINES,
             floor: float = 1.0, targets=None) -> EvalResult:
    """One row per (scenario, model) over the test split.

    Each target is masked by its scenario before retrieval; targets whose
    retrieval fails are counted in ``n_skipped``. Baselines run on the same
    retrieved targets so the rows are comparable.
    """
    targets = evaluation_targets(series, h, split) if targets is None else list(targets)
    result = EvalResult()
    for sc in scenarios:
        scenario = sc if isinstance(sc, Scenario) else Scenario.parse(sc, h)
        label = scenario.label
        batch = build_batch(series, frame, targets, h, epsilon, scenario)
        windows = batch.windows
        n_fail = len(batch.failures)
        if windows:
            y = np.stack([series.values[:, w.t_ref:w.t_ref + h] for w in windows])
            y_hat, u_a = predictor(windows, series, frame)
            result.rows.append({
                "scenario": label, "model": predictor.name,
                "mape": mape_loss(y, y_hat, floor), "picp": picp(y, y_hat, u_a),
                "up": up(y, u_a, floor), "n_targets": len(windows), "n_skipped": n_fail,
            })
            _residuals(result, label, predictor.name, windows, y, y_hat, u_a)
        else:
            result.rows.append({"scenario": label, "model": predictor.name, "mape": None,
                                "picp": None, "up": None, "n_targets": 0, "n_skipped": n_fail})
        for kind in baselines:
            ys, preds, kept = [], [], []
            skipped = n_fail
            for w in windows:
                masked = apply_scenario(series, scenario.at(w.t_ref))
                try:
                    preds.append(baseline_forecast(kind, masked, frame, w.t_ref, h))
                except NoHistoricalMatch:
                    skipped += 1
                    continue
                ys.append(series.values[:, w.t_ref:w.t_ref + h])
                kept.append(w)
            row = {"scenario": label, "model": kind, "mape": None, "picp": None, "up": None,
                   "n_targets": len(kept), "n_skipped": skipped}
            if kept:
                y, y_hat = np.stack(ys), np.stack(preds)
                row["mape"] = mape_loss(y, y_hat, floor)
                _residuals(result, label, kind, kept, y, y_hat, None)
            result.rows.append(row)
    return result


def _residuals(result, label, model, windows, y, y_hat, u_a):
    n, h = y.shape[1:]
    for b, w in enumerate(windows):
        for i in range(n):
            for s in range(h):
                result.residuals.append({
                    "scenario": label, "model": model, "t0": w.t_ref, "region": i, "step": s,
                    "y": float(y[b, i, s]), "y_hat": float(y_hat[b, i, s]),
                    "u_a": None if u_a is None else float(u_a[b, i, s]),
                })


__all__ = [
    "BASELINES", "EvalResult", "ModelPredictor", "OraclePredictor",
    "baseline_forecast", "evaluate", "picp", "evaluation_targets", "up",
]
