"""Command-line entry point: ``fdg2s <subcommand> [options]``.

Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.
Errors are reported on stderr as ``ERROR <code>: <message>``. Log verbosity
comes from the ``FDG2S_LOG_LEVEL`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import platform
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .data import Scenario, apply_scenario, chronological_split
from .errors import (
    ConfigHashMismatch,
    DomainError,
    FDG2SError,
    InvalidConfig,
    NoValidTargets,
    UsageError,
)
from .evaluation import ModelPredictor, OraclePredictor, evaluate, evaluation_targets, picp, up
from .factor_graph import AdjacencyBank, bank_key, build_adjacency_bank
from .io import (
    load_expected_factors,
    load_factors,
    load_graph,
    load_observations,
    save_factors,
    save_graph,
    save_observations,
    write_json,
)
from .kernels import BACKEND
from .sampler import build_batch, retrieve
from .synthetic import generate_synthetic
from .trainer import load_checkpoint, mape_loss, save_checkpoint, train

log = logging.getLogger("fdg2s")

COMMANDS = ("synth", "build-bank", "train", "predict", "evaluate", "uq-report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidConfig(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (or a manifest.json)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5")
    common.add_argument("--seed", type=int, help="single source of randomness")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="directory holding observations/weather/graph CSVs")

    parser = _Parser(prog="fdg2s", description="Non-consecutive spatiotemporal forecasting "
                     "with factor-decoupled graph aggregation and disentangled uncertainty.")
    parser.add_argument("--version", action="version", version=f"fdg2s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="write a seeded synthetic city")
    sub.add_parser("build-bank", parents=[common], help="precompute the adjacency bank")
    p = sub.add_parser("train", parents=[common], help="fit a model on the training split")
    p.add_argument("--bank", help="reuse a bank built by build-bank")
    p.add_argument("--scenario", help="missing pattern to train for, e.g. early:7")

    p = sub.add_parser("predict", parents=[common], help="forecast one target")
    _model_args(p)
    p.add_argument("--expected", required=True, help="CSV of expected weather for the target")
    p.add_argument("--t0", required=True, help="target start: ISO timestamp or interval index")
    p.add_argument("--scenario", help="mask history relative to t0 before retrieval")

    p = sub.add_parser("evaluate", parents=[common], help="score the test split")
    _model_args(p, required=False)
    p.add_argument("--oracle", action="store_true", help="score the ground-truth fixture")
    p.add_argument("--scenario", action="append", help="scenario(s) to evaluate")

    p = sub.add_parser("uq-report", parents=[common], help="uncertainty over the test split")
    _model_args(p)
    p.add_argument("--scenario", help="scenario to mask (default: the training scenario)")
    return parser


def _model_args(p, required: bool = True):
    p.add_argument("--checkpoint", required=required, help="model checkpoint (.npz)")
    p.add_argument("--bank", help="adjacency bank (default: bank.npz next to the checkpoint)")


# ---------------------------------------------------------------------------
# helpers

def _load_config(args) -> config_mod.RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    if args.data is not None:
        overrides.append(f"data.dir={args.data}")
    return config_mod.load(args.config, overrides)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg, inputs: list, outputs: list) -> None:
    write_json({
        "kind": config_mod.MANIFEST_KIND,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "outputs": sorted(str(p) for p in outputs),
        "versions": {
            "fdg2s": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": BACKEND,
        },
    }, out / "manifest.json")


def _load_data(cfg):
    d = cfg.data
    series = load_observations(d.path("observations"))
    frame = load_factors(d.path("weather"), series, d.n_weather_types or None, d.fill_limit_hours,
                         embedding_dim=cfg.model.location_dim, seed=cfg.seed)
    graph = load_graph(d.path("graph"), series.n_regions) if d.path("graph").exists() else None
    inputs = [d.path(k) for k in ("observations", "weather", "graph")]
    return series, frame, graph, inputs


def _load_model(args, frame):
    model, _, header = load_checkpoint(args.checkpoint, frame)
    bank_path = Path(args.bank) if args.bank else Path(args.checkpoint).with_name("bank.npz")
    bank = AdjacencyBank.load(bank_path)
    if header.get("bank_key") != bank.meta.get("key"):
        raise ConfigHashMismatch(f"{bank_path} was not built for checkpoint {args.checkpoint}")
    return model, bank, header, [Path(args.checkpoint), bank_path]


def _parse_t0(text: str, series) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise InvalidConfig(f"--t0 {text!r} is neither an index nor an ISO timestamp") from None
    delta = (ts - series.timestamp(0)).total_seconds() / 60.0
    if delta % series.interval_minutes:
        raise InvalidConfig(f"--t0 {text} is not on the {series.interval_minutes}-minute grid")
    return int(delta // series.interval_minutes)


def _num(v) -> str:
    return f"{'-':>8}" if v is None else f"{v:8.3f}"


def _scenario(text, h):
    return Scenario.parse(text, h) if text else None


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, frame, graph, truth = generate_synthetic(cfg.synth, cfg.seed)
    paths = [out / "observations.csv", out / "weather.csv", out / "graph.csv",
             out / "ground_truth.json"]
    save_observations(series, paths[0])
    save_factors(frame, series, paths[1])
    save_graph(graph, paths[2])
    write_json(truth.to_json(), paths[3])
    _write_manifest(out, "synth", cfg, [], paths)
    print(f"wrote {series.n_regions} regions x {series.n_intervals} intervals to {out}")
    return 0


def _bank_for(cfg, series, frame):
    h = cfg.model.horizon
    train_end, _ = chronological_split(series.n_intervals, series.intervals_per_day,
                                       cfg.train.split)
    bank = build_adjacency_bank(series, frame, h, cfg.model.factor_types, cfg.train.max_windows,
                                cfg.seed, train_end)
    bank.meta["key"] = bank_key(series, h, cfg.model.factor_types, cfg.train.max_windows,
                                cfg.seed, train_end)
    return bank


def cmd_build_bank(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, frame, _, inputs = _load_data(cfg)
    bank = _bank_for(cfg, series, frame)
    bank.save(out / "bank.npz")
    _write_manifest(out, "build-bank", cfg, inputs, [out / "bank.npz"])
    print(f"bank: {len(bank.matrices)} matrices, empty values: {bank.meta['empty'] or 'none'}")
    return 0


def cmd_train(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario:
        Scenario.parse(args.scenario, cfg.model.horizon)
        cfg.train.scenarios = (args.scenario,)
    series, frame, graph, inputs = _load_data(cfg)
    bank = AdjacencyBank.load(args.bank) if args.bank else _bank_for(cfg, series, frame)
    if args.bank:
        inputs.append(Path(args.bank))
    ckpt_dir = out / "checkpoints" if cfg.train.checkpoint_epochs else None
    result = train(series, frame, graph, cfg.train, cfg.model, bank,
                   log_path=out / "train_log.jsonl", checkpoint_dir=ckpt_dir)
    save_checkpoint(out / "model.npz", result.model, result.optimizer, result.bank, cfg.train,
                    result.config_hash)
    result.bank.save(out / "bank.npz")
    outputs = [out / "model.npz", out / "bank.npz", out / "train_log.jsonl"]
    if ckpt_dir:
        outputs += sorted(ckpt_dir.glob("*.npz"))
    _write_manifest(out, "train", cfg, inputs, outputs)
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"(validation MAPE {result.val_mape[result.best_epoch - 1]:.4f}); "
          f"{len(result.train_targets)} training targets")
    return 0


def cmd_predict(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, frame, _, inputs = _load_data(cfg)
    model, bank, header, model_inputs = _load_model(args, frame)
    h = model.config.horizon
    t0 = _parse_t0(args.t0, series)
    ctx = load_expected_factors(args.expected, frame, series, t0, h)
    scenario = _scenario(args.scenario, h)
    view = apply_scenario(series, scenario.at(t0)) if scenario else series
    windows = retrieve(view, frame, t0, ctx, h, header["train_config"]["epsilon"],
                       scenario.label if scenario else "")
    batch = model.prepare([windows], frame, bank, targets=False)
    report = model.reports(batch, cfg.uq.n_copies, cfg.uq.rho, cfg.seed, series.region_ids)[0]
    rows = [(c["region"], c["step"], repr(c["y_hat"]), repr(c["u_e"]), repr(c["u_a"]),
             repr(c["lower"]), repr(c["upper"])) for c in report.cells()]
    _write_rows(out / "forecast.csv", ("region", "step", "y_hat", "u_e", "u_a", "lower", "upper"),
                rows)
    payload = report.to_json()
    payload["timestamp"] = series.timestamp(t0).isoformat()
    payload["k_p"], payload["k_h"] = windows.k_p, windows.k_h
    write_json(payload, out / "uncertainty.json")
    _write_manifest(out, "predict", cfg, inputs + model_inputs + [Path(args.expected)],
                    [out / "forecast.csv", out / "uncertainty.json"])
    print(f"forecast for {payload['timestamp']}: mean u_e {payload['mean_u_e']:.6g}, "
          f"mean u_a {payload['mean_u_a']:.6g}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, frame, _, inputs = _load_data(cfg)
    h = cfg.model.horizon
    epsilon = cfg.train.epsilon
    if args.oracle:
        predictor = OraclePredictor(series)
    elif args.checkpoint:
        model, bank, header, model_inputs = _load_model(args, frame)
        inputs += model_inputs
        h = model.config.horizon
        epsilon = header["train_config"]["epsilon"]
        predictor = ModelPredictor(model, bank, header["train_config"]["pi_q"])
    else:
        raise InvalidConfig("evaluate needs --checkpoint or --oracle")
    scenarios = args.scenario or list(cfg.evaluate.scenarios)
    result = evaluate(predictor, series, frame, scenarios, h, epsilon, cfg.train.split,
                      cfg.evaluate.baselines, cfg.model.mape_floor)
    result.write(out / "metrics.csv", out / "residuals.csv")
    _write_manifest(out, "evaluate", cfg, inputs, [out / "metrics.csv", out / "residuals.csv"])
    print(f"{'scenario':<18}{'model':<20}{'mape':>8}{'picp':>8}{'up':>8}{'n':>6}{'skip':>6}")
    for r in result.rows:
        print(f"{r['scenario']:<18}{r['model']:<20}{_num(r['mape'])}{_num(r['picp'])}"
              f"{_num(r['up'])}{r['n_targets']:>6}{r['n_skipped']:>6}")
    return 0


def cmd_uq_report(args, cfg) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, frame, _, inputs = _load_data(cfg)
    model, bank, header, model_inputs = _load_model(args, frame)
    tc = header["train_config"]
    h = model.config.horizon
    text = args.scenario or (tc["scenarios"][0] if tc["scenarios"] else None)
    scenario = _scenario(text, h)
    targets = evaluation_targets(series, h, tuple(tc["split"]))
    res = build_batch(series, frame, targets, h, tc["epsilon"], scenario)
    if not res.windows:
        raise NoValidTargets("no test target survived retrieval")
    batch = model.prepare(res.windows, frame, bank, series, tc["pi_q"])
    reports = model.reports(batch, cfg.uq.n_copies, cfg.uq.rho, cfg.seed, series.region_ids)
    y = batch.y
    y_hat = np.stack([r.y_hat for r in reports])
    u_a = np.stack([r.u_a for r in reports])
    u_e = np.stack([r.u_e for r in reports])
    summary = {
        "scenario": scenario.label if scenario else "",
        "n_targets": len(reports),
        "n_skipped": len(res.failures),
        "mape": mape_loss(y, y_hat, model.config.mape_floor),
        "picp": picp(y, y_hat, u_a),
        "up": up(y, u_a, model.config.mape_floor),
        "mean_u_e": float(u_e.mean()),
        "mean_u_a": float(u_a.mean()),
    }
    write_json({"summary": summary, "targets": [r.to_json() for r in reports]},
               out / "uq_report.json")
    rows = []
    for b, r in enumerate(reports):
        for c in r.cells():
            i = series.region_ids.index(c["region"])
            rows.append((r.t0, c["region"], c["step"], repr(float(y[b, i, c["step"]])),
                         repr(c["y_hat"]), repr(c["u_e"]), repr(c["u_as"]), repr(c["u_av"]),
                         repr(c["lower"]), repr(c["upper"])))
    _write_rows(out / "uq_cells.csv", ("t0", "region", "step", "y", "y_hat", "u_e", "u_as", "u_av",
                                       "lower", "upper"), rows)
    _write_manifest(out, "uq-report", cfg, inputs + model_inputs,
                    [out / "uq_report.json", out / "uq_cells.csv"])
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in summary.items()))
    return 0


HANDLERS = {
    "synth": cmd_synth, "build-bank": cmd_build_bank, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "uq-report": cmd_uq_report,
}


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FDG2S_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
        return HANDLERS[args.command](args, cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 1
    except FDG2SError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"ERROR FileNotFound: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
