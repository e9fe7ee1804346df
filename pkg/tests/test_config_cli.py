from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from fdg2s import config
from fdg2s.cli import run
from fdg2s.errors import InvalidConfig

SMALL = ["--set", "synth.n_regions=4", "--set", "synth.days=35", "--set",
         "synth.intervals_per_day=4"]
MODEL = ["--set", "model.horizon=3", "--set", "model.kernel_dim=8", "--set",
         "model.lstm_hidden=8", "--set", "model.decoder_hidden=8", "--set", "train.epochs=2",
         "--set", "train.scenarios=[failure:3]"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_defaults_and_rejections(tmp_path):
    cfg = config.load()
    assert (cfg.model.alpha, cfg.model.kernel_dim, cfg.train.pi_q, cfg.train.epsilon,
            cfg.model.horizon) == (0.5, 64, 4, 3, 6)
    for bad in ({"model": {"nope": 1}}, {"extra": 1}, {"train": {"seed": 3}},
                {"model": {"alpha": 2.0}}, {"model": {"kernel_dim": "wide"}}):
        with pytest.raises(InvalidConfig):
            config.from_dict(bad)
    path = tmp_path / "run.yaml"
    path.write_text("seed: 5\nmodel:\n  alpha: 0.25\n")
    cfg = config.load(path, ["model.alpha=0.75", "train.epochs=3", "train.lr=1e-2"])
    assert cfg.model.alpha == 0.75 and cfg.train.epochs == 3 and cfg.train.seed == 5
    assert cfg.train.lr == 0.01
    with pytest.raises(InvalidConfig):
        config.load(path, ["model.alpha"])


def test_config_round_trip(tmp_path):
    cfg = config.load(None, ["seed=9", "evaluate.scenarios=[early:3]"])
    cfg.dump(tmp_path / "c.yaml")
    again = config.load(tmp_path / "c.yaml")
    assert again.hash() == cfg.hash()


def test_usage_errors(tmp_path, capsys):
    assert run(["synth", "--unknown-flag"]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["synth", "--set", "model.nope=1", "--out", str(tmp_path)]) == 2
    assert "ERROR InvalidConfig" in capsys.readouterr().err
    assert run(["evaluate", "--data", str(tmp_path / "missing"), "--oracle"]) == 2


def test_synth_byte_identical(tmp_path):
    names = ("observations.csv", "weather.csv", "graph.csv", "ground_truth.json",
             "manifest.json")
    snapshots = []
    for _ in range(2):
        assert run(["synth", "--seed", "1", "--out", str(tmp_path), *SMALL]) == 0
        snapshots.append({n: (tmp_path / n).read_bytes() for n in names})
    assert snapshots[0] == snapshots[1]
    manifest = json.loads(snapshots[0]["manifest.json"])
    assert manifest["seed"] == 1 and manifest["command"] == "synth"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, model = root / "data", root / "model"
    assert run(["synth", "--seed", "2", "--out", str(data), *SMALL]) == 0
    assert run(["train", "--seed", "2", "--data", str(data), "--out", str(model), *SMALL,
                *MODEL]) == 0
    return root, data, model


def test_oracle_evaluate_prints_zero(trained, tmp_path, capsys):
    _, data, _ = trained
    assert run(["evaluate", "--oracle", "--data", str(data), "--out", str(tmp_path),
                "--scenario", "failure:3", "--set", "model.horizon=3"]) == 0
    out = capsys.readouterr().out
    line = next(x for x in out.splitlines() if "oracle" in x)
    assert line.split()[2:5] == ["0.000", "1.000", "0.000"]


def test_train_outputs_and_manifest_replay(trained, tmp_path):
    _, data, model = trained
    for name in ("model.npz", "bank.npz", "train_log.jsonl", "manifest.json"):
        assert (model / name).exists()
    manifest = model / "manifest.json"
    replay = tmp_path / "replay"
    assert run(["train", "--config", str(manifest), "--out", str(replay)]) == 0
    a = np.load(model / "model.npz")
    b = np.load(replay / "model.npz")
    assert sorted(a.files) == sorted(b.files)
    for k in a.files:
        assert np.array_equal(a[k], b[k]), k
    assert (model / "train_log.jsonl").read_bytes() == (replay / "train_log.jsonl").read_bytes()


def _expected_file(path, data, t0, h, weather=None, drop_last=False):
    rows = _rows(data / "weather.csv")
    stamps = sorted({r["timestamp"] for r in rows})[t0:t0 + h]
    if drop_last:
        stamps = stamps[:-1]
    keep = [r for r in rows if r["timestamp"] in stamps]
    if weather is not None:
        for r in keep:
            r["weather_type"] = str(weather)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(keep)
    return path


def test_predict_matches_evaluate(trained, tmp_path):
    _, data, model = trained
    ev = tmp_path / "ev"
    ckpt = str(model / "model.npz")
    assert run(["evaluate", "--checkpoint", ckpt, "--data", str(data), "--out", str(ev),
                "--scenario", "failure:3"]) == 0
    res = [r for r in _rows(ev / "residuals.csv") if r["model"] == "fdg2s"]
    t0 = int(res[0]["t0"])
    expected = _expected_file(tmp_path / "exp.csv", data, t0, 3)
    pr = tmp_path / "pr"
    assert run(["predict", "--checkpoint", ckpt, "--data", str(data), "--out", str(pr),
                "--expected", str(expected), "--t0", str(t0), "--scenario", "failure:3"]) == 0
    fc = _rows(pr / "forecast.csv")
    ev_cells = {(int(r["region"]), int(r["step"])): r["y_hat"] for r in res if int(r["t0"]) == t0}
    regions = sorted({r["region"] for r in fc}, key=[r["region"] for r in fc].index)
    assert len(fc) == len(ev_cells)
    for r in fc:
        assert r["y_hat"] == ev_cells[(regions.index(r["region"]), int(r["step"]))]
        assert float(r["lower"]) <= float(r["y_hat"]) <= float(r["upper"])
    report = json.loads((pr / "uncertainty.json").read_text())
    assert report["t0"] == t0


def test_predict_weather_sensitivity_and_missing(trained, tmp_path, capsys):
    _, data, model = trained
    ckpt = str(model / "model.npz")
    t0 = 30 * 4 + 1
    forecasts = {}
    for w in (0, 1):
        exp = _expected_file(tmp_path / f"w{w}.csv", data, t0, 3, weather=w)
        out = tmp_path / f"p{w}"
        assert run(["predict", "--checkpoint", ckpt, "--data", str(data), "--out", str(out),
                    "--expected", str(exp), "--t0", str(t0)]) == 0
        forecasts[w] = [float(r["y_hat"]) for r in _rows(out / "forecast.csv")]
    assert forecasts[0] != forecasts[1]
    exp = _expected_file(tmp_path / "short.csv", data, t0, 3, drop_last=True)
    code = run(["predict", "--checkpoint", ckpt, "--data", str(data), "--out",
                str(tmp_path / "px"), "--expected", str(exp), "--t0", str(t0)])
    assert code == 2
    assert "ERROR MissingExpectedFactors" in capsys.readouterr().err


def test_inputs_not_mutated(trained, tmp_path):
    _, data, model = trained
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    assert run(["uq-report", "--checkpoint", str(model / "model.npz"), "--data", str(data),
                "--out", str(tmp_path)]) == 0
    assert {p.name: p.read_bytes() for p in data.iterdir()} == before
    summary = json.loads((tmp_path / "uq_report.json").read_text())["summary"]
    assert 0.0 <= summary["picp"] <= 1.0 and summary["mean_u_e"] >= 0.0
