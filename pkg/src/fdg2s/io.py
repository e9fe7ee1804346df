"""CSV ingestion and serialization for observations, weather and graphs.

Observation files come in two layouts, detected from the header:

* long: ``timestamp,region_id,value`` -- one row per (region, interval)
* wide: ``timestamp,r0,r1,...`` -- one column per region

An empty field (or any configured sentinel) marks a missing observation.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_right
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data import FactorFrame, Graph, MaskedSeries
from .errors import EmptyFile, InvalidConfig, IrregularStride, MissingWeatherCoverage, UnknownRegion

TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"
DEFAULT_SCHEMA = {
    "timestamp": "timestamp",
    "region": "region_id",
    "value": "value",
    "missing": ("", "NA", "nan", "NaN"),
    "regions": None,
}


def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.strip())


def _fmt_time(ts: datetime) -> str:
    return ts.strftime(TIME_FORMAT)


def _fmt_float(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if header is None or not rows:
        raise EmptyFile(f"{path}: no data rows")
    return [h.strip() for h in header], rows


def _stride(stamps: list[datetime], path) -> int:
    if len(stamps) < 2:
        raise IrregularStride(f"{path}: need at least two timestamps to infer the stride")
    deltas = {(b - a) for a, b in zip(stamps, stamps[1:])}
    if len(deltas) != 1:
        raise IrregularStride(f"{path}: timestamps are not evenly spaced ({sorted(deltas)[:3]} ...)")
    delta = deltas.pop()
    minutes = delta.total_seconds() / 60.0
    if minutes <= 0 or minutes != int(minutes) or 1440 % int(minutes):
        raise IrregularStride(f"{path}: stride of {minutes} min does not divide a day")
    return int(minutes)


def load_observations(path, schema: dict | None = None) -> MaskedSeries:
    """Parse a long- or wide-layout observation CSV into a :class:`MaskedSeries`."""
    sc = dict(DEFAULT_SCHEMA)
    sc.update(schema or {})
    missing = set(sc["missing"])
    header, rows = _read_rows(path)
    ts_col = header.index(sc["timestamp"]) if sc["timestamp"] in header else 0
    known = list(sc["regions"]) if sc["regions"] else None

    if sc["region"] in header and sc["value"] in header:
        r_col, v_col = header.index(sc["region"]), header.index(sc["value"])
        cells: dict = {}
        regions: list[str] = list(known) if known else []
        seen = set(regions)
        for row in rows:
            rid = row[r_col].strip()
            if rid not in seen:
                if known is not None:
                    raise UnknownRegion(f"{path}: region {rid!r} not in schema")
                seen.add(rid)
                regions.append(rid)
            ts = _parse_time(row[ts_col])
            raw = row[v_col].strip() if v_col < len(row) else ""
            cells[(rid, ts)] = None if raw in missing else float(raw)
        stamps = sorted({ts for _, ts in cells})
    else:
        regions = [h for i, h in enumerate(header) if i != ts_col]
        if known is not None:
            for rid in regions:
                if rid not in known:
                    raise UnknownRegion(f"{path}: region {rid!r} not in schema")
        stamps_raw = [_parse_time(r[ts_col]) for r in rows]
        if any(b <= a for a, b in zip(stamps_raw, stamps_raw[1:])):
            raise IrregularStride(f"{path}: timestamps must be strictly increasing")
        stamps = stamps_raw
        cells = {}
        for row, ts in zip(rows, stamps):
            for j, rid in enumerate(regions):
                col = j if j < ts_col else j + 1
                raw = row[col].strip() if col < len(row) else ""
                cells[(rid, ts)] = None if raw in missing else float(raw)

    minutes = _stride(stamps, path)
    index = {ts: k for k, ts in enumerate(stamps)}
    values = np.full((len(regions), len(stamps)), np.nan)
    ridx = {rid: i for i, rid in enumerate(regions)}
    for (rid, ts), v in cells.items():
        if v is not None:
            values[ridx[rid], index[ts]] = v
    mask = np.isfinite(values)
    return MaskedSeries(values, mask, minutes, 1440 // minutes, stamps[0], tuple(regions))


def save_observations(series: MaskedSeries, path) -> None:
    """Wide layout; masked cells are written as empty fields."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *series.region_ids])
        for t in range(series.n_intervals):
            w.writerow([_fmt_time(series.timestamp(t)),
                        *(_fmt_float(v) for v in series.values[:, t])])


def load_factors(path_weather, series: MaskedSeries, n_weather_types: int | None = None,
                 fill_limit_hours: float = 24.0, numeric_names=("temp", "precip"),
                 embedding_dim: int = 8, seed: int = 0) -> FactorFrame:
    """Weather CSV (forward-filled to every interval) plus calendar factors.

    A ``region_id`` of ``*`` or empty applies the record to every region.
    """
    header, rows = _read_rows(path_weather)
    cols = {name: header.index(name) for name in ("timestamp", "region_id", "weather_type")
            if name in header}
    if len(cols) < 3:
        raise InvalidConfig(f"{path_weather}: header needs timestamp,region_id,weather_type")
    num_cols = [header.index(n) for n in numeric_names if n in header]
    names = tuple(n for n in numeric_names if n in header)
    ridx = {rid: i for i, rid in enumerate(series.region_ids)}
    per_region: list[list] = [[] for _ in series.region_ids]
    for row in rows:
        rid = row[cols["region_id"]].strip()
        rec = (_parse_time(row[cols["timestamp"]]), int(row[cols["weather_type"]]),
               [float(row[c]) for c in num_cols])
        if rid in ("", "*", "city", "all"):
            for lst in per_region:
                lst.append(rec)
        elif rid in ridx:
            per_region[ridx[rid]].append(rec)
        else:
            raise UnknownRegion(f"{path_weather}: region {rid!r} not in the observations")

    n, t_len = series.n_regions, series.n_intervals
    wtype = np.zeros((n, t_len), dtype=np.int64)
    numeric = np.zeros((n, t_len, len(num_cols)))
    limit = timedelta(hours=fill_limit_hours)
    for i, recs in enumerate(per_region):
        recs.sort(key=lambda r: r[0])
        times = [r[0] for r in recs]
        for t in range(t_len):
            ts = series.timestamp(t)
            k = bisect_right(times, ts) - 1
            if k < 0 or ts - times[k] > limit:
                raise MissingWeatherCoverage(
                    f"region {series.region_ids[i]}: no weather record within "
                    f"{fill_limit_hours} h before {_fmt_time(ts)}"
                )
            wtype[i, t] = recs[k][1]
            numeric[i, t] = recs[k][2]
    w_count = n_weather_types if n_weather_types is not None else int(wtype.max()) + 1
    start = series.start or series.timestamp(0)
    slot0 = (start.hour * 60 + start.minute) // series.interval_minutes
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 0.1, size=(n, embedding_dim))
    return FactorFrame(series.intervals_per_day, start.weekday(), slot0, wtype, numeric,
                       w_count, location_embedding=emb, numeric_names=names)


def save_factors(frame: FactorFrame, series: MaskedSeries, path) -> None:
    """Per-region, per-interval weather CSV (raw numeric values)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "region_id", "weather_type", *frame.numeric_names])
        for t in range(frame.n_intervals):
            stamp = _fmt_time(series.timestamp(t))
            for i, rid in enumerate(series.region_ids):
                w.writerow([stamp, rid, int(frame.weather_type[i, t]),
                            *(_fmt_float(v) for v in frame.numeric_raw[i, t])])


def load_expected_factors(path, frame: FactorFrame, series: MaskedSeries, t0: int, h: int):
    """Expected future weather for steps ``[t0, t0+h)`` -> :class:`TargetContext`.

    Same columns as the weather CSV; every (region, step) must be covered
    exactly, either by a region row or a city-wide (``*``) row.
    """
    from .errors import MissingExpectedFactors

    header, rows = _read_rows(path)
    try:
        c_ts, c_r, c_w = (header.index(k) for k in ("timestamp", "region_id", "weather_type"))
    except ValueError:
        raise MissingExpectedFactors(f"{path}: needs timestamp,region_id,weather_type") from None
    num_cols = []
    for name in frame.numeric_names:
        if name not in header:
            raise MissingExpectedFactors(f"{path}: missing numeric weather column {name!r}")
        num_cols.append(header.index(name))
    ridx = {rid: i for i, rid in enumerate(series.region_ids)}
    steps = {series.timestamp(t0 + s): s for s in range(h)}
    w = np.full((series.n_regions, h), -1, dtype=np.int64)
    num = np.zeros((series.n_regions, h, len(num_cols)))
    for row in rows:
        ts = _parse_time(row[c_ts])
        if ts not in steps:
            continue
        s = steps[ts]
        rid = row[c_r].strip()
        if not row[c_w].strip():
            continue
        targets = range(series.n_regions) if rid in ("", "*", "city", "all") else [ridx.get(rid)]
        for i in targets:
            if i is None:
                raise UnknownRegion(f"{path}: region {rid!r} unknown")
            w[i, s] = int(row[c_w])
            num[i, s] = [float(row[c]) for c in num_cols]
    if (w < 0).any():
        i, s = np.argwhere(w < 0)[0]
        raise MissingExpectedFactors(
            f"no expected weather for region {series.region_ids[i]} at "
            f"{_fmt_time(series.timestamp(t0 + s))}"
        )
    return frame.expected_context(t0, w, num)


def save_graph(graph: Graph, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for s, d, wt in graph.edges:
            w.writerow([s, d, repr(float(wt))])


def load_graph(path, n_nodes: int) -> Graph:
    _, rows = _read_rows(path)
    return Graph(n_nodes, tuple((int(r[0]), int(r[1]), float(r[2])) for r in rows))


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
