"""Weight-shared LSTM heads: the forecaster and the reconstruction decoder.

Each node contributes one scalar sequence; rows of every input are
independent sequences, which keeps the heads equivariant to node order.
Gate layout in the fused weight matrices is [input, forget, output, cell].
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .factor_graph import affine, init_dense


def init_lstm(rng: np.random.Generator, input_size: int, hidden: int, name: str) -> dict:
    limit_x = np.sqrt(6.0 / (input_size + 4 * hidden))
    limit_h = np.sqrt(6.0 / (5 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget gate
    return {
        "wx": Tensor(rng.uniform(-limit_x, limit_x, size=(input_size, 4 * hidden)), True, f"{name}.wx"),
        "wh": Tensor(rng.uniform(-limit_h, limit_h, size=(hidden, 4 * hidden)), True, f"{name}.wh"),
        "b": Tensor(bias, True, f"{name}.b"),
    }


def lstm_cell(x_t, h_prev, c_prev, params: dict):
    """One step; ``h_prev``/``c_prev`` may be None for a zero initial state."""
    hidden = params["wh"].shape[0]
    z = ad.matmul(x_t, params["wx"])
    if h_prev is not None:
        z = ad.add(z, ad.matmul(h_prev, params["wh"]))
    z = ad.add(z, ad.broadcast_to(params["b"], z.shape))
    i = ad.sigmoid(z[:, :hidden])
    f = ad.sigmoid(z[:, hidden:2 * hidden])
    o = ad.sigmoid(z[:, 2 * hidden:3 * hidden])
    g = ad.tanh(z[:, 3 * hidden:])
    c = ad.mul(i, g) if c_prev is None else ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_final_state(seq, params: dict) -> Tensor:
    """Run over (R, L) scalar sequences and return the last hidden state (R, H)."""
    seq = ad._as_tensor(seq)
    if seq.ndim != 2:
        raise ShapeMismatch(f"expected (rows, steps) sequences, got {seq.shape}")
    h = c = None
    for t in range(seq.shape[1]):
        h, c = lstm_cell(seq[:, t:t + 1], h, c, params)
    return h


def init_head(rng, hidden: int, horizon: int, location_dim: int, name: str = "lstm") -> dict:
    w, b = init_dense(rng, hidden + location_dim, horizon, f"{name}.readout")
    return {"lstm": init_lstm(rng, 1, hidden, name), "w": w, "b": b}


def init_decoder(rng, hidden: int, horizon: int, name: str = "decoder") -> dict:
    w, b = init_dense(rng, hidden, horizon, f"{name}.readout")
    return {"lstm": init_lstm(rng, 1, hidden, name), "w": w, "b": b}


def _rows(x: Tensor) -> tuple:
    return x.shape[:-1], ad.reshape(x, (-1, x.shape[-1]))


def forecast(x_p, h_ins, location_embedding, head: dict) -> Tensor:
    """h-step forecast from the 2h-step sequence [x_p | h_ins] of every node.

    ``x_p`` and ``h_ins`` are (..., N, h); ``location_embedding`` is (N, d_l)
    and is concatenated with the final hidden state before the readout.
    """
    x_p, h_ins = ad._as_tensor(x_p), ad._as_tensor(h_ins)
    emb = ad._as_tensor(location_embedding)
    if x_p.shape != h_ins.shape:
        raise ShapeMismatch(f"x_p {x_p.shape} and h_ins {h_ins.shape} differ")
    if emb.shape[0] != x_p.shape[-2]:
        raise ShapeMismatch(f"embedding rows {emb.shape[0]} vs {x_p.shape[-2]} nodes")
    lead, seq = _rows(ad.concat([x_p, h_ins], axis=-1))
    hidden = lstm_final_state(seq, head["lstm"])
    emb_rows = ad.reshape(ad.broadcast_to(emb, lead + (emb.shape[1],)), (-1, emb.shape[1]))
    out = affine(ad.concat([hidden, emb_rows], axis=1), head["w"], head["b"])
    return ad.reshape(out, lead + (out.shape[-1],))


def reconstruct(x_h, decoder: dict) -> Tensor:
    """Reconstruction of the instantaneous window through the decoder LSTM."""
    x_h = ad._as_tensor(x_h)
    if x_h.shape[-1] != decoder["w"].shape[1]:
        raise ShapeMismatch(f"window length {x_h.shape[-1]} vs decoder output {decoder['w'].shape[1]}")
    lead, seq = _rows(x_h)
    out = affine(lstm_final_state(seq, decoder["lstm"]), decoder["w"], decoder["b"])
    return ad.reshape(out, lead + (out.shape[-1],))
