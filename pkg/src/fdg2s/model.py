"""The full forecasting model: parameters, batch preparation and forward pass.

Observations enter the network standardized by the training mean/std; the
forecast is mapped back to natural units before the MAPE term. Aleatoric
widths are learned in standardized units and reported multiplied by the
training std.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FACTOR_TYPES, FactorFrame, MaskedSeries, TargetContext, encode_static
from .factor_graph import (
    AdjacencyBank,
    aggregation_weights,
    combine_adjacency,
    gnn_forward,
    init_dense,
    init_status_network,
)
from .sampler import RetrievedWindows
from .seq_model import forecast, init_decoder, init_head, reconstruct
from .uq import (
    UncertaintyReport,
    consistency_loss,
    epistemic,
    recon_uncertainty,
    variation_head,
    variation_labels,
    variation_loss,
)


@dataclass
class ModelConfig:
    horizon: int = 6
    alpha: float = 0.5
    kernel_dim: int = 64
    lstm_hidden: int = 96
    decoder_hidden: int = 32
    location_dim: int = 8
    factor_types: tuple = FACTOR_TYPES
    mape_floor: float = 1.0
    consistency_floor: float = 1e-3
    # False treats u_as as a constant inside the consistency term, so the
    # decoder learns from reconstruction alone; the applied update is then
    # no longer the exact gradient of the total loss
    cons_trains_decoder: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["factor_types"] = list(self.factor_types)
        return d


@dataclass
class PreparedBatch:
    """Numpy inputs of B targets, ready for the tape."""

    x_p: np.ndarray  # B, N, h (standardized)
    x_h: np.ndarray  # B, N, h (standardized)
    c_first: np.ndarray  # B, N, width - d_l
    c_steps: np.ndarray  # B, N, h, width - d_l
    matrices: np.ndarray  # B, M, N, N
    y: np.ndarray | None = None  # B, N, h (natural units)
    u_av_label: np.ndarray | None = None  # B, N, h (standardized)
    t0: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.x_p.shape[0]

    def subset(self, idx) -> "PreparedBatch":
        idx = np.asarray(idx)
        return PreparedBatch(
            self.x_p[idx], self.x_h[idx], self.c_first[idx], self.c_steps[idx], self.matrices[idx],
            None if self.y is None else self.y[idx],
            None if self.u_av_label is None else self.u_av_label[idx],
            [self.t0[i] for i in idx],
        )


class ForecastModel:
    """All learnable parameters plus the data scaling they were trained with."""

    def __init__(self, config: ModelConfig, frame: FactorFrame, scale: tuple, seed: int = 0):
        self.config = config
        self.scale = (float(scale[0]), float(scale[1]))
        self.n_regions = frame.n_regions
        self.segment_widths = frame.segment_widths()
        self.segment_widths["location"] = config.location_dim
        self.width = sum(self.segment_widths.values())
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = config
        h, k = cfg.horizon, cfg.kernel_dim
        p: dict[str, Tensor] = {}
        emb = frame.location_embedding
        if emb is None or emb.shape != (frame.n_regions, cfg.location_dim):
            emb = rng.normal(0.0, 0.1, size=(frame.n_regions, cfg.location_dim))
        p["location_embedding"] = Tensor(emb, True, "location_embedding")
        for f in cfg.factor_types:
            p[f"S.{f}"] = Tensor(np.zeros(self.segment_widths[f]), True, f"S.{f}")
        inter = sum(self.segment_widths[f] for f in cfg.factor_types)
        p["S.interaction"] = Tensor(np.zeros(inter), True, "S.interaction")
        for name, out in (("B0", k), ("B1", h)):
            for key, t in init_status_network(rng, self.width, k, out, name).items():
                p[f"{name}.{key}"] = t
        limit0 = np.sqrt(6.0 / (h + k))
        p["omega0"] = Tensor(rng.uniform(-limit0, limit0, size=(h, k)), True, "omega0")
        p["omega1"] = Tensor(rng.uniform(-limit0, limit0, size=(k, h)), True, "omega1")
        head = init_head(rng, cfg.lstm_hidden, h, cfg.location_dim, "lstm")
        for key, t in head["lstm"].items():
            p[f"lstm.{key}"] = t
        p["lstm.readout.w"], p["lstm.readout.b"] = head["w"], head["b"]
        dec = init_decoder(rng, cfg.decoder_hidden, h, "decoder")
        for key, t in dec["lstm"].items():
            p[f"decoder.{key}"] = t
        p["decoder.readout.w"], p["decoder.readout.b"] = dec["w"], dec["b"]
        w_av, b_av = init_dense(rng, self.width, 1, "var_head")
        p["var_head.w"], p["var_head.b"] = w_av, b_av
        self.params = p

    # parameter groups ----------------------------------------------------
    def _group(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def gnn_params(self) -> dict:
        return {"omega0": self.params["omega0"], "omega1": self.params["omega1"],
                "B0": self._group("B0"), "B1": self._group("B1")}

    def head_params(self) -> dict:
        g = self._group("lstm")
        return {"lstm": {k: g[k] for k in ("wx", "wh", "b")},
                "w": g["readout.w"], "b": g["readout.b"]}

    def decoder_params(self) -> dict:
        g = self._group("decoder")
        return {"lstm": {k: g[k] for k in ("wx", "wh", "b")},
                "w": g["readout.w"], "b": g["readout.b"]}

    def param_groups(self) -> dict:
        """Named groups used by gradient audits."""
        groups = {
            "S_k": [v for k, v in self.params.items() if k.startswith("S.")],
            "w_B": [v for k, v in self.params.items() if k.startswith(("B0.", "B1."))],
            "omega": [self.params["omega0"], self.params["omega1"]],
            "lstm": [v for k, v in self.params.items() if k.startswith("lstm.")],
            "decoder": [v for k, v in self.params.items() if k.startswith("decoder.")],
            "omega_av": [self.params["var_head.w"], self.params["var_head.b"]],
            "location_embedding": [self.params["location_embedding"]],
        }
        return groups

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {v.shape}")
            v.data = arrays[k]

    # scaling ---------------------------------------------------------------
    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.scale[0]) / self.scale[1]

    # batch preparation ---------------------------------------------------
    def prepare(self, windows: list, frame: FactorFrame, bank: AdjacencyBank,
                series: MaskedSeries | None = None, pi_q: int = 4,
                targets: bool = True) -> PreparedBatch:
        """Stack retrieved windows into arrays.

        When ``targets`` is set, ``series`` supplies the ground truth and the
        variation labels; labels only read cells before each target start.
        """
        h = self.config.horizon
        x_p = np.stack([self.standardize(w.x_p) for w in windows])
        x_h = np.stack([self.standardize(w.x_h) for w in windows])
        c_steps = np.stack([encode_static(frame, w.context) for w in windows])
        c_first = c_steps[:, :, 0, :]
        mats = np.stack([bank.target_matrices(w.context) for w in windows])
        y = labels = None
        if targets and series is not None:
            y = np.stack([series.values[:, w.t_ref:w.t_ref + h] for w in windows])
            labels = np.stack([
                variation_labels(series, frame, w.context, pi_q, limit=w.t_ref)
                for w in windows
            ]) / self.scale[1]
        return PreparedBatch(x_p, x_h, c_first, c_steps, mats, y, labels,
                             [w.t_ref for w in windows])

    # forward ---------------------------------------------------------------
    def factor_vectors(self, static: np.ndarray) -> Tensor:
        """Append the (trainable) location embedding to static encodings (B, N, [h,] w)."""
        emb = self.params["location_embedding"]
        lead = static.shape[:-1]
        n = self.n_regions
        if len(lead) == 2:
            e = ad.broadcast_to(emb, lead + (emb.shape[1],))
        else:
            e = ad.reshape(emb, (n, 1, emb.shape[1]))
            e = ad.broadcast_to(e, lead + (emb.shape[1],))
        return ad.concat([Tensor._wrap(static), e], axis=-1)

    def adjacency(self, c: Tensor, matrices: np.ndarray) -> Tensor:
        segs = []
        weights = []
        start = 0
        bounds = {}
        for name, width in self.segment_widths.items():
            bounds[name] = (start, start + width)
            start += width
        for f in self.config.factor_types:
            a, b = bounds[f]
            segs.append(c[..., a:b])
            weights.append(self.params[f"S.{f}"])
        segs.append(ad.concat(segs, axis=-1))
        weights.append(self.params["S.interaction"])
        g = aggregation_weights(segs, weights)
        return combine_adjacency(matrices, g)

    def predict_standardized(self, x_p, x_h, batch: PreparedBatch) -> Tensor:
        """Standardized forecast for (possibly J-stacked) inputs."""
        c = self.factor_vectors(batch.c_first)
        adj = self.adjacency(c, batch.matrices)
        x_p, x_h = ad._as_tensor(x_p), ad._as_tensor(x_h)
        extra = x_h.ndim - 3
        if extra:
            # corrupted copies share factors and adjacency
            reps = x_h.shape[:extra]
            adj = ad.broadcast_to(adj, reps + adj.shape)
            c = ad.broadcast_to(c, reps + c.shape)
        h_ins = gnn_forward(x_h, adj, c, self.gnn_params(), self.config.alpha)
        return forecast(x_p, h_ins, self.params["location_embedding"], self.head_params())

    def forward(self, batch: PreparedBatch) -> dict:
        std_y = self.predict_standardized(batch.x_p, batch.x_h, batch)
        y_hat = ad.add(ad.mul(std_y, self.scale[1]), self.scale[0])
        x_hat = reconstruct(batch.x_h, self.decoder_params())
        u_as = recon_uncertainty(batch.x_h, x_hat)
        c_steps = self.factor_vectors(batch.c_steps)
        u_av = variation_head(c_steps, self.params["var_head.w"], self.params["var_head.b"])
        return {"y_std": std_y, "y_hat": y_hat, "x_hat": x_hat, "u_as": u_as, "u_av": u_av}

    def losses(self, batch: PreparedBatch, out: dict | None = None) -> dict:
        out = out if out is not None else self.forward(batch)
        y = batch.y
        denom = np.maximum(np.abs(y), self.config.mape_floor)
        mape = ad.mean(ad.div(ad.abs(ad.sub(y, out["y_hat"])), denom))
        l_rec = ad.mean(out["u_as"])
        l_av = variation_loss(batch.u_av_label, out["u_av"])
        u_as = out["u_as"]
        if not self.config.cons_trains_decoder:
            u_as = Tensor(u_as.data)
        l_cons = consistency_loss(self.standardize(y), out["y_std"], u_as, out["u_av"],
                                  self.config.consistency_floor)
        return {"mape": mape, "l_rec": l_rec, "l_av": l_av, "l_cons": l_cons}

    def total_loss(self, batch: PreparedBatch, gammas) -> tuple:
        parts = self.losses(batch)
        g1, g2, g3 = gammas
        total = ad.add(ad.add(ad.add(parts["mape"], ad.mul(parts["l_rec"], g1)),
                              ad.mul(parts["l_av"], g2)), ad.mul(parts["l_cons"], g3))
        return total, parts

    # inference -------------------------------------------------------------
    def predict(self, batch: PreparedBatch) -> dict:
        with ad.no_grad():
            out = self.forward(batch)
        s = self.scale[1]
        return {
            "y_hat": out["y_hat"].data,
            "u_as": out["u_as"].data * s,
            "u_av": out["u_av"].data * s,
        }

    def epistemic(self, batch: PreparedBatch, n_copies: int = 10, rho: float = 0.01,
                  seed: int = 0) -> np.ndarray:
        """Variance (natural units) of forecasts under input corruption."""
        s, m = self.scale[1], self.scale[0]

        def run(cp, ch):
            return self.predict_standardized(cp, ch, batch).data * s + m

        # inputs are standardized, so the training std is 1 here
        return epistemic(run, batch.x_p, batch.x_h, n_copies, rho, seed, sigma=1.0)

    def reports(self, batch: PreparedBatch, n_copies: int = 10, rho: float = 0.01,
                seed: int = 0, region_ids: tuple = ()) -> list:
        pred = self.predict(batch)
        u_e = self.epistemic(batch, n_copies, rho, seed)
        return [
            UncertaintyReport(pred["y_hat"][b], u_e[b], pred["u_as"][b], pred["u_av"][b],
                              region_ids, batch.t0[b])
            for b in range(len(batch))
        ]
