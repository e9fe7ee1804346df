"""Loss assembly, adaptive auxiliary weights, Adam, and the training loop."""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import FactorFrame, MaskedSeries, Scenario, chronological_split
from .errors import NoValidTargets, NonFiniteLoss, ShapeMismatch
from .factor_graph import AdjacencyBank, bank_key, build_adjacency_bank
from .model import ForecastModel, ModelConfig, PreparedBatch
from .sampler import build_batch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GAMMA_MIN, GAMMA_MAX = 1e-3, 1e3
AUX_NAMES = ("l_rec", "l_av", "l_cons")


def mape_loss(y, y_hat, floor: float = 1.0):
    """Mean of |y - y_hat| / max(|y|, floor); numpy in, float out."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"{y.shape} vs {y_hat.shape}")
    return float(np.mean(np.abs(y - y_hat) / np.maximum(np.abs(y), floor)))


def adaptive_gammas(mape: float, aux, previous=None) -> tuple:
    """gamma_k = mape / aux_k clamped to [1e-3, 1e3]; a zero aux keeps the old weight."""
    previous = previous or (1.0, 1.0, 1.0)
    out = []
    for a, prev in zip(aux, previous):
        if a == 0 or not np.isfinite(a):
            out.append(float(prev))
        else:
            out.append(float(np.clip(mape / a, GAMMA_MIN, GAMMA_MAX)))
    return tuple(out)


@dataclass
class LossBreakdown:
    mape: float
    l_rec: float
    l_av: float
    l_cons: float
    gammas: tuple
    total: float = 0.0

    def __post_init__(self):
        g1, g2, g3 = self.gammas
        self.total = self.mape + g1 * self.l_rec + g2 * self.l_av + g3 * self.l_cons

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gammas"] = list(self.gammas)
        return d


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.step_count = 0

    def step(self, grads: dict) -> None:
        """``grads`` maps parameter names to arrays; missing names count as zero."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            elif g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1 ** t)
            v_hat = self.v[name] / (1.0 - b2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"m/{k}"])
            self.v[k] = np.array(arrays[f"v/{k}"])
        self.step_count = int(step_count)


def adam_step(params: dict, grads: dict, state: Adam) -> Adam:
    """Functional spelling of :meth:`Adam.step` (``params`` must be ``state.params``)."""
    if params is not state.params:
        raise ValueError("optimizer state belongs to a different parameter dict")
    state.step(grads)
    return state


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    patience: int = 10
    seed: int = 0
    split: tuple = (0.6, 0.1, 0.3)
    # one model per missing pattern; several entries are assigned round-robin,
    # an empty tuple trains on unmasked history
    scenarios: tuple = ("early:7",)
    target_stride: int = 1
    epsilon: int = 3
    pi_q: int = 4
    max_windows: int = 64
    checkpoint_epochs: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["scenarios"] = list(self.scenarios)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


@dataclass
class TargetSet:
    batch: PreparedBatch | None
    t0: list
    scenarios: list
    failures: list = field(default_factory=list)

    def __len__(self) -> int:
        return 0 if self.batch is None else len(self.batch)


@dataclass
class TrainResult:
    model: ForecastModel
    optimizer: Adam
    bank: AdjacencyBank
    history: list
    val_mape: list
    best_epoch: int
    checkpoints: dict  # epoch -> parameter arrays
    train_targets: TargetSet
    val_targets: TargetSet
    config_hash: str = ""


def enumerate_targets(series: MaskedSeries, start: int, stop: int, h: int, stride: int) -> list:
    """Target starts t0 with ``[t0, t0 + h)`` inside ``[start, stop)`` and observed."""
    out = []
    for t0 in range(start, stop - h + 1, stride):
        if series.is_observed(t0, t0 + h):
            out.append(t0)
    return out


def collect_targets(model: ForecastModel, series: MaskedSeries, frame: FactorFrame,
                    bank: AdjacencyBank, t0s: list, scenarios: list, h: int, epsilon: int,
                    pi_q: int) -> TargetSet:
    """Retrieve and prepare targets, each under its own scenario (``None`` = unmasked)."""
    windows, kept, labels, failures = [], [], [], []
    by_scenario: dict = {}
    for pos, (t0, sc) in enumerate(zip(t0s, scenarios)):
        by_scenario.setdefault(sc, []).append((pos, t0))
    results = {}
    for sc, items in by_scenario.items():
        scenario = Scenario.parse(sc, h) if sc else None
        res = build_batch(series, frame, [t for _, t in items], h, epsilon, scenario)
        failed = {p for p, _, _ in res.failures}
        ok_iter = iter(res.windows)
        for local, (pos, t0) in enumerate(items):
            if local in failed:
                msg = next(m for p, _, m in res.failures if p == local)
                failures.append((t0, sc, msg))
            else:
                results[pos] = (next(ok_iter), sc)
    for pos in sorted(results):
        w, sc = results[pos]
        windows.append(w)
        kept.append(w.t_ref)
        labels.append(sc)
    batch = model.prepare(windows, frame, bank, series, pi_q) if windows else None
    return TargetSet(batch, kept, labels, failures)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, bank_id: str) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                       "bank": bank_id}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _breakdown(parts_sum: dict, count: int, gammas) -> LossBreakdown:
    return LossBreakdown(*(parts_sum[k] / count for k in ("mape", "l_rec", "l_av", "l_cons")),
                         gammas=tuple(gammas))


def train(series: MaskedSeries, frame: FactorFrame, graph=None, config: TrainConfig | None = None,
          model_config: ModelConfig | None = None, bank: AdjacencyBank | None = None,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Fit a model on the chronological training split.

    The bank is built from the training split only (unless supplied).
    Validation targets come from the next split at stride h. The parameters
    with the best validation MAPE are restored before returning.
    ``graph`` is accepted for interface symmetry; proximity comes from the bank.
    """
    cfg = config or TrainConfig()
    mcfg = model_config or ModelConfig()
    h = mcfg.horizon
    td = series.intervals_per_day
    train_end, val_end = chronological_split(series.n_intervals, td, cfg.split)
    if bank is None:
        bank = build_adjacency_bank(series, frame, h, mcfg.factor_types, cfg.max_windows,
                                    cfg.seed, train_end)
        bank.meta["key"] = bank_key(series, h, mcfg.factor_types, cfg.max_windows, cfg.seed,
                                    train_end)
    if bank.meta.get("train_end", train_end) > train_end:
        raise ValueError("adjacency bank was built beyond the training split")
    model = ForecastModel(mcfg, frame, bank.scale, cfg.seed)
    scen = list(cfg.scenarios) or [None]

    train_t0 = enumerate_targets(series, 0, train_end, h, cfg.target_stride)
    val_t0 = enumerate_targets(series, train_end, val_end, h, h)
    train_set = collect_targets(model, series, frame, bank, train_t0,
                                [scen[i % len(scen)] for i in range(len(train_t0))],
                                h, cfg.epsilon, cfg.pi_q)
    val_set = collect_targets(model, series, frame, bank, val_t0,
                              [scen[i % len(scen)] for i in range(len(val_t0))],
                              h, cfg.epsilon, cfg.pi_q)
    if len(train_set) == 0:
        raise NoValidTargets("no training target survived retrieval")
    log.info("training targets: %d kept, %d skipped; validation: %d",
             len(train_set), len(train_set.failures), len(val_set))

    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    rng = np.random.default_rng(cfg.seed)
    gammas = None
    history, val_history, checkpoints = [], [], {}
    best = (np.inf, 0, model.state_arrays())
    names = {id(p): k for k, p in model.params.items()}
    log_fh = open(log_path, "w") if log_path else None
    chash = config_hash(mcfg, cfg, bank.meta.get("key", ""))
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            sums = dict.fromkeys(("mape", "l_rec", "l_av", "l_cons"), 0.0)
            n_batches = 0
            epoch_gammas = gammas
            for b_id, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = train_set.batch.subset(order[start:start + cfg.batch_size])
                with ad.Tape() as tape:
                    parts = model.losses(batch)
                    vals = {k: v.item() for k, v in parts.items()}
                    if epoch_gammas is None:
                        epoch_gammas = adaptive_gammas(vals["mape"],
                                                       [vals[k] for k in AUX_NAMES])
                    g1, g2, g3 = epoch_gammas
                    total = ad.add(ad.add(ad.add(parts["mape"], ad.mul(parts["l_rec"], g1)),
                                          ad.mul(parts["l_av"], g2)),
                                   ad.mul(parts["l_cons"], g3))
                    if not np.isfinite(total.item()):
                        raise NonFiniteLoss(
                            f"non-finite loss in epoch {epoch}, batch {b_id}", batch_id=b_id
                        )
                    grads = tape.backward(total)
                opt.step({names[id(p)]: g for p, g in grads.items() if id(p) in names})
                for k in sums:
                    sums[k] += vals[k]
                n_batches += 1
            bd = _breakdown(sums, n_batches, epoch_gammas)
            history.append(bd)
            gammas = adaptive_gammas(bd.mape, [getattr(bd, k) for k in AUX_NAMES], epoch_gammas)
            v_mape = validation_mape(model, val_set) if len(val_set) else bd.mape
            val_history.append(v_mape)
            if v_mape < best[0]:
                best = (v_mape, epoch, model.state_arrays())
            if epoch in cfg.checkpoint_epochs:
                checkpoints[epoch] = model.state_arrays()
                if checkpoint_dir:
                    save_checkpoint(Path(checkpoint_dir) / f"epoch-{epoch:03d}.npz", model, opt,
                                    bank, cfg, chash)
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch, **bd.to_dict(), "val_mape": v_mape},
                                        sort_keys=True) + "\n")
            log.info("epoch %d: total %.4f mape %.4f val %.4f", epoch, bd.total, bd.mape, v_mape)
            if epoch - best[1] >= cfg.patience:
                log.info("early stop after %d epochs without improvement", cfg.patience)
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state(best[2])
    return TrainResult(model, opt, bank, history, val_history, best[1], checkpoints,
                       train_set, val_set, chash)


def validation_mape(model: ForecastModel, targets: TargetSet) -> float:
    pred = model.predict(targets.batch)
    return mape_loss(targets.batch.y, pred["y_hat"], model.config.mape_floor)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: ForecastModel, optimizer: Adam | None, bank: AdjacencyBank,
                    train_cfg: TrainConfig, chash: str) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "scale": list(model.scale),
        "seed": model.seed,
        "bank_key": bank.meta.get("key", ""),
        "config_hash": chash,
        "adam_step": optimizer.step_count if optimizer else 0,
        "adam": ({"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                  "eps": optimizer.eps} if optimizer else None),
    }
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    if optimizer is not None:
        arrays.update({f"adam/{k}": v for k, v in optimizer.state_arrays().items()})
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, frame: FactorFrame):
    """Returns (model, optimizer-or-None, header)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        adam = {k[len("adam/"):]: z[k].copy() for k in z.files if k.startswith("adam/")}
    mc = dict(header["model_config"])
    mc["factor_types"] = tuple(mc["factor_types"])
    model = ForecastModel(ModelConfig(**mc), frame, tuple(header["scale"]), header["seed"])
    model.load_state(params)
    opt = None
    if header.get("adam"):
        a = header["adam"]
        opt = Adam(model.params, a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.load_state(adam, header["adam_step"])
    return model, opt, header
