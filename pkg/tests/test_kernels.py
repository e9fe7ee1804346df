from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from fdg2s import kernels
from fdg2s.kernels import compiled_backend, python_backend

needs_compiled = pytest.mark.skipif(compiled_backend is None,
                                    reason="compiled extension not built")


def _variation_inputs(rng, n=5, t_len=200, m=30, td=8, n_weather=3):
    cal = np.arange(t_len)
    values = rng.normal(10, 3, size=(n, t_len))
    mask = rng.random((n, t_len)) > 0.2
    weather = rng.integers(0, n_weather, size=(n, t_len))
    cell_t = rng.integers(0, t_len + 20, size=m)
    return (values, mask, (cal // td) % 7, cal % td, weather, cell_t, (cell_t // td) % 7,
            cell_t % td, rng.integers(0, n_weather, size=(n, m)), rng.integers(0, t_len, size=m))


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_window_similarity_backends_agree(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(2, 9)), 4))
    w[0, 0] = 0.0
    a = python_backend.window_similarity(w)
    b = compiled_backend.window_similarity(w)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    assert np.array_equal(np.diag(b), np.ones(w.shape[1]))


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_variation_stats_backends_agree(seed):
    rng = np.random.default_rng(seed)
    args = _variation_inputs(rng)
    for pi_q in (1, 2, 4, 9):
        sa, ca = python_backend.variation_stats(*args, pi_q)
        sb, cb = compiled_backend.variation_stats(*args, pi_q)
        assert np.array_equal(ca, cb)
        assert ca.max() <= pi_q
        np.testing.assert_allclose(sa, sb, rtol=1e-12, atol=1e-12)


def test_backend_selection_honours_env():
    expected = "cython" if compiled_backend is not None else "python"
    assert kernels.BACKEND == expected
    code = "import fdg2s.kernels as k; print(k.BACKEND, k.compiled_backend is None)"
    env = dict(os.environ, FDG2S_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out == ["python", "True"]
