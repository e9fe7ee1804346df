from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from fdg2s.data import FactorFrame, MaskedSeries
from fdg2s.factor_graph import build_adjacency_bank
from fdg2s.model import ForecastModel, ModelConfig
from fdg2s.sampler import build_batch
from fdg2s.synthetic import SynthConfig, generate_synthetic

settings.register_profile("fdg2s", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("fdg2s")

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def make_series(values, mask=None, td=4, minutes=None):
    values = np.asarray(values, dtype=float)
    mask = np.ones(values.shape, dtype=bool) if mask is None else mask
    return MaskedSeries(values, mask, minutes or 1440 // td, td)


def make_frame(n, t_len, td=4, weather=None, n_weather=3, first_dow=0, first_slot=0, seed=0):
    rng = np.random.default_rng(seed)
    if weather is None:
        weather = np.zeros((n, t_len), dtype=int)
    weather = np.broadcast_to(np.asarray(weather), (n, t_len)).copy()
    numeric = rng.normal(size=(n, t_len, 2))
    return FactorFrame(td, first_dow, first_slot, weather, numeric, n_weather,
                       location_embedding=rng.normal(0, 0.1, size=(n, 8)))


@pytest.fixture(scope="session")
def small_synth():
    """5 regions, 35 days, 4 intervals per day."""
    cfg = SynthConfig(n_regions=5, days=35, intervals_per_day=4, weather_block_hours=6.0)
    return generate_synthetic(cfg, seed=3)


def toy_instance(n=4, h=2, factor_types=("dow", "slot", "weather"), hidden=8, kernel=8,
                 n_targets=3, seed=0):
    """A small model plus a prepared batch with targets and variation labels."""
    cfg = SynthConfig(n_regions=n, days=21, intervals_per_day=4)
    series, frame, _, _ = generate_synthetic(cfg, seed=seed)
    mcfg = ModelConfig(horizon=h, kernel_dim=kernel, lstm_hidden=hidden, decoder_hidden=hidden,
                       factor_types=factor_types)
    bank = build_adjacency_bank(series, frame, h, factor_types, train_end=14 * 4)
    model = ForecastModel(mcfg, frame, bank.scale, seed)
    targets = list(range(15 * 4, 15 * 4 + 5 * n_targets, 5))
    windows = build_batch(series, frame, targets, h, strict=True).windows
    batch = model.prepare(windows, frame, bank, series, 4)
    return model, batch, (series, frame, bank)
