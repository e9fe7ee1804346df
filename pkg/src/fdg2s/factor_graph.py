"""Factor-conditioned region similarity and the two-layer factor-decoupled GNN.

The bank holds one N x N similarity matrix per (factor type, categorical
value), built once from the training split. At forecast time the matrices
matching the target's expected factors are mixed with softmax weights that
depend on the factor encodings, row-normalized, and used for message
passing.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FACTOR_TYPES, NUMERIC_BINS, FactorFrame, MaskedSeries, TargetContext
from .errors import (
    LengthMismatch,
    MissingBankEntry,
    SegmentWidthMismatch,
    ShapeMismatch,
    WidthMismatch,
)
from .kernels import window_similarity

BANK_VERSION = 1


def pairwise_similarity(p, q) -> float:
    """Mean of an inverse-distance score and a rescaled cosine, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"window lengths differ: {p.shape} vs {q.shape}")
    dist = float(np.sqrt(np.sum((p - q) ** 2)))
    pp, qq = float(p @ p), float(q @ q)
    if pp == 0.0 and qq == 0.0:
        cos = 1.0
    elif pp == 0.0 or qq == 0.0:
        cos = 0.0
    else:
        cos = min(1.0, max(-1.0, float(p @ q) / np.sqrt(pp * qq)))
    return 0.5 * (1.0 / (1.0 + dist)) + 0.5 * ((cos + 1.0) / 2.0)


# ---------------------------------------------------------------------------
# adjacency bank

def _value_domain(frame: FactorFrame, factor: str) -> range:
    return {
        "dow": range(7),
        "slot": range(frame.intervals_per_day),
        "weather": range(frame.n_weather_types),
        "numeric": range(NUMERIC_BINS),
        "location": range(1),
    }[factor]


@dataclass
class AdjacencyBank:
    matrices: dict  # (factor, value) -> N x N
    factor_types: tuple
    h: int
    max_windows: int
    numeric_edges: np.ndarray
    scale: tuple  # (mean, std) used to standardize windows
    meta: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return next(iter(self.matrices.values())).shape[0] if self.matrices else 0

    def lookup(self, factor: str, value: int) -> np.ndarray:
        try:
            return self.matrices[(factor, int(value))]
        except KeyError:
            raise MissingBankEntry(
                f"no similarity matrix for {factor}={value} (no fully observed training window)"
            ) from None

    def numeric_bin(self, numeric_z_first) -> int:
        """Bin of the region-mean of the first numeric weather feature."""
        x = float(np.mean(np.asarray(numeric_z_first)))
        return int(np.searchsorted(self.numeric_edges, x, side="right"))

    def target_values(self, ctx: TargetContext) -> dict:
        """Categorical value of each factor type at the target's first step."""
        vals = {
            "dow": int(ctx.day_of_week[0]),
            "slot": int(ctx.daily_slot[0]),
            "weather": ctx.city_weather,
            "numeric": self.numeric_bin(ctx.numeric_z[:, 0, 0]) if ctx.numeric_z.shape[2] else 0,
            "location": 0,
        }
        return {k: vals[k] for k in self.factor_types}

    def target_matrices(self, ctx: TargetContext) -> np.ndarray:
        """(M, N, N) stack for the target's factor values, in ``factor_types`` order."""
        vals = self.target_values(ctx)
        return np.stack([self.lookup(k, vals[k]) for k in self.factor_types])

    # serialization ------------------------------------------------------
    def save(self, path) -> None:
        arrays = {f"{k}={v}": m for (k, v), m in self.matrices.items()}
        header = {
            "version": BANK_VERSION,
            "factor_types": list(self.factor_types),
            "h": self.h,
            "max_windows": self.max_windows,
            "scale": list(self.scale),
            "meta": self.meta,
        }
        arrays["__numeric_edges__"] = np.asarray(self.numeric_edges)
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "AdjacencyBank":
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("version") != BANK_VERSION:
                raise ValueError(f"unsupported bank version {header.get('version')}")
            mats = {}
            for key in z.files:
                if key.startswith("__"):
                    continue
                f, v = key.split("=")
                mats[(f, int(v))] = z[key].copy()
            edges = z["__numeric_edges__"].copy()
        return cls(mats, tuple(header["factor_types"]), header["h"], header["max_windows"],
                   edges, tuple(header["scale"]), header["meta"])


def timestamp_values(frame: FactorFrame, factor: str, ts: np.ndarray,
                     numeric_edges: np.ndarray) -> np.ndarray:
    if factor == "dow":
        return frame.day_of_week(ts)
    if factor == "slot":
        return frame.daily_slot(ts)
    if factor == "weather":
        return frame.city_weather_all()[ts]
    if factor == "numeric":
        if frame.numeric_dim == 0:
            return np.zeros(len(ts), dtype=np.int64)
        x = frame.numeric_weather[:, ts, 0].mean(axis=0)
        return np.searchsorted(numeric_edges, x, side="right")
    if factor == "location":
        return np.zeros(len(ts), dtype=np.int64)
    raise ValueError(f"unknown factor type {factor!r}")


def bank_key(series: MaskedSeries, h: int, factor_types, max_windows: int, seed: int,
             train_end: int) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(np.nan_to_num(series.values, nan=-1.0)).tobytes())
    digest.update(np.ascontiguousarray(series.observed_mask).tobytes())
    digest.update(json.dumps([h, list(factor_types), max_windows, seed, train_end]).encode())
    return digest.hexdigest()


def build_adjacency_bank(series: MaskedSeries, frame: FactorFrame, h: int,
                         factor_types: Sequence[str] = FACTOR_TYPES, max_windows: int = 64,
                         seed: int = 0, train_end: int | None = None) -> AdjacencyBank:
    """Average window similarity per factor value over the training split.

    Windows are the fully observed ``[ts, ts + h)`` spans inside
    ``[0, train_end)``, grouped by the factor value at ``ts`` and capped at
    ``max_windows`` per value by seeded uniform subsampling. Values with no
    window get no matrix (lookups for them raise ``MissingBankEntry``).
    """
    for f in factor_types:
        if f not in FACTOR_TYPES:
            raise ValueError(f"unknown factor type {f!r}")
    train_end = series.n_intervals if train_end is None else train_end
    mask = series.observed_mask[:, :train_end]
    obs = series.values[:, :train_end][mask]
    mean = float(obs.mean()) if obs.size else 0.0
    std = float(obs.std()) if obs.size else 1.0
    std = std if std > 0 else 1.0

    col_ok = mask.all(axis=0).astype(np.int64)
    cs = np.concatenate([[0], np.cumsum(col_ok)])
    starts = np.arange(0, max(train_end - h + 1, 0))
    starts = starts[(cs[starts + h] - cs[starts]) == h]

    if frame.numeric_dim and starts.size:
        x = frame.numeric_weather[:, :train_end, 0].mean(axis=0)
        edges = np.quantile(x, np.linspace(0, 1, NUMERIC_BINS + 1)[1:-1])
    else:
        edges = np.zeros(NUMERIC_BINS - 1)

    std_values = (np.nan_to_num(series.values[:, :train_end]) - mean) / std
    matrices, counts, empty = {}, {}, []
    for fi, factor in enumerate(factor_types):
        labels = timestamp_values(frame, factor, starts, edges)
        for value in _value_domain(frame, factor):
            ts = starts[labels == value]
            if ts.size == 0:
                empty.append(f"{factor}={value}")
                continue
            if ts.size > max_windows:
                rng = np.random.default_rng([seed, fi, value])
                ts = np.sort(rng.choice(ts, size=max_windows, replace=False))
            windows = np.stack([std_values[:, t:t + h] for t in ts])
            matrices[(factor, value)] = window_similarity(windows)
            counts[f"{factor}={value}"] = int(ts.size)
    meta = {"train_end": int(train_end), "seed": int(seed), "counts": counts, "empty": empty}
    return AdjacencyBank(matrices, tuple(factor_types), h, max_windows, edges, (mean, std), meta)


def load_or_build_bank(cache_dir, series, frame, h, factor_types=FACTOR_TYPES, max_windows=64,
                       seed=0, train_end=None) -> AdjacencyBank:
    """Reuse a sidecar bank keyed by dataset hash and build config, else build and store it."""
    train_end = series.n_intervals if train_end is None else train_end
    key = bank_key(series, h, factor_types, max_windows, seed, train_end)
    path = Path(cache_dir) / f"bank-{key[:16]}.npz"
    if path.exists():
        bank = AdjacencyBank.load(path)
        if bank.meta.get("key") == key:
            return bank
    bank = build_adjacency_bank(series, frame, h, factor_types, max_windows, seed, train_end)
    bank.meta["key"] = key
    path.parent.mkdir(parents=True, exist_ok=True)
    bank.save(path)
    return bank


# ---------------------------------------------------------------------------
# mixing

def interaction_adjacency(matrices) -> np.ndarray:
    """Entrywise product across the M single-factor matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise ShapeMismatch("need at least one matrix")
    if any(m.shape != mats[0].shape for m in mats):
        raise ShapeMismatch(f"matrix shapes differ: {[m.shape for m in mats]}")
    out = mats[0].copy()
    for m in mats[1:]:
        out = out * m
    return out


def aggregation_weights(segments: Sequence, weights: Sequence) -> Tensor:
    """Softmax over the M+1 logits ``S_k . c_k``.

    ``segments[k]`` has shape (..., d_k) and ``weights[k]`` shape (d_k,);
    the last segment is the concatenation of the others. Output (..., M+1).
    """
    if len(segments) != len(weights):
        raise SegmentWidthMismatch(f"{len(segments)} segments but {len(weights)} weight vectors")
    logits = []
    for k, (c, s) in enumerate(zip(segments, weights)):
        c, s = ad._as_tensor(c), ad._as_tensor(s)
        if s.ndim != 1 or c.shape[-1] != s.shape[0]:
            raise SegmentWidthMismatch(
                f"segment {k}: factor width {c.shape[-1]} vs weight width {s.shape}"
            )
        lead = c.shape[:-1]
        flat = ad.reshape(c, (-1, c.shape[-1]))
        logit = ad.matmul(flat, ad.reshape(s, (s.shape[0], 1)))
        logits.append(ad.reshape(logit, lead + (1,)))
    return ad.softmax(ad.concat(logits, axis=-1))


def combine_adjacency(matrices, g, normalize: bool = True) -> Tensor:
    """Weighted single-factor matrices plus weighted interaction product.

    ``matrices`` is (M, N, N) or (B, M, N, N); ``g`` is (M+1,), (N, M+1) or
    (B, N, M+1). Per-node weights scale rows. With ``normalize`` each row is
    divided by its sum.
    """
    mats = np.asarray(matrices, dtype=np.float64)
    g = ad._as_tensor(g)
    m_count = mats.shape[-3]
    n = mats.shape[-1]
    if g.shape[-1] != m_count + 1:
        raise ShapeMismatch(f"need {m_count + 1} weights, got {g.shape[-1]}")
    batch = mats.shape[:-3]
    out_shape = batch + (n, n)
    inter = np.prod(mats, axis=-3)
    total = None
    for k in range(m_count + 1):
        mk = mats[..., k, :, :] if k < m_count else inter
        gk = g[..., k]
        if gk.ndim == 0:
            term = ad.mul(mk, gk)
        else:
            if gk.shape[-1] != n:
                raise ShapeMismatch(f"per-node weights cover {gk.shape[-1]} nodes, matrices {n}")
            gk = ad.broadcast_to(ad.reshape(gk, gk.shape + (1,)), out_shape)
            term = ad.mul(gk, Tensor._wrap(np.broadcast_to(mk, out_shape).copy()))
        total = term if total is None else ad.add(total, term)
    if not normalize:
        return total
    rows = ad.sum(total, axis=-1, keepdims=True)
    return ad.div(total, ad.broadcast_to(rows, out_shape))


# ---------------------------------------------------------------------------
# networks

def affine(x, w: Tensor, b: Tensor) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, ad.broadcast_to(b, y.shape))


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> tuple:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), True, f"{name}.w")
    b = Tensor(np.zeros(fan_out), True, f"{name}.b")
    return w, b


def init_status_network(rng, in_width: int, hidden: int, out_width: int, name: str) -> dict:
    w1, b1 = init_dense(rng, in_width, hidden, f"{name}.l1")
    w2, b2 = init_dense(rng, hidden, out_width, f"{name}.l2")
    return {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


def status_network(c, params: dict) -> Tensor:
    """Two-layer perceptron from factor vectors (..., width) to node features."""
    c = ad._as_tensor(c)
    if c.shape[-1] != params["w1"].shape[0]:
        raise WidthMismatch(f"factor width {c.shape[-1]} vs network input {params['w1'].shape[0]}")
    hidden = ad.relu(affine(c, params["w1"], params["b1"]))
    return affine(hidden, params["w2"], params["b2"])


def gnn_layer(features, adjacency, c, omega: Tensor, status: dict, alpha: float) -> Tensor:
    message = ad.matmul(ad.matmul(adjacency, features), omega)
    return ad.add(ad.mul(status_network(c, status), alpha), ad.mul(message, 1.0 - alpha))


def gnn_forward(x_h, adjacency, c, params: dict, alpha: float = 0.5) -> Tensor:
    """Two blended layers: h -> kernel_dim (ReLU) -> h (linear).

    ``params`` holds ``omega0``, ``omega1`` and the status networks ``B0``,
    ``B1``. Shapes: x_h (..., N, h), adjacency (..., N, N), c (..., N, width).
    """
    x_h, adjacency, c = ad._as_tensor(x_h), ad._as_tensor(adjacency), ad._as_tensor(c)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if adjacency.shape[-1] != x_h.shape[-2] or x_h.shape[-1] != params["omega0"].shape[0]:
        raise ShapeMismatch(
            f"x_h {x_h.shape}, adjacency {adjacency.shape}, omega0 {params['omega0'].shape}"
        )
    h1 = ad.relu(gnn_layer(x_h, adjacency, c, params["omega0"], params["B0"], alpha))
    return gnn_layer(h1, adjacency, c, params["omega1"], params["B1"], alpha)
