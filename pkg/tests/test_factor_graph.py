from __future__ import annotations

import numpy as np
import pytest

from fdg2s import autodiff as ad
from fdg2s.autodiff import Tensor
from fdg2s.errors import LengthMismatch, MissingBankEntry, SegmentWidthMismatch
from fdg2s.factor_graph import (
    AdjacencyBank,
    aggregation_weights,
    build_adjacency_bank,
    combine_adjacency,
    gnn_forward,
    init_status_network,
    interaction_adjacency,
    load_or_build_bank,
    pairwise_similarity,
    status_network,
)
from fdg2s.kernels import python_backend, window_similarity

from conftest import make_frame, make_series


def test_similarity_examples():
    assert pairwise_similarity([1, 2], [1, 2]) == pytest.approx(1.0, abs=1e-15)
    assert pairwise_similarity([1, 0], [-1, 0]) == pytest.approx(1 / 6, abs=1e-15)
    assert pairwise_similarity([0, 0], [0, 0]) == 1.0
    with pytest.raises(LengthMismatch):
        pairwise_similarity([1, 2], [1, 2, 3])


def _brute_matrix(windows):
    n = windows.shape[1]
    out = np.zeros((n, n))
    for w in windows:
        for i in range(n):
            for j in range(n):
                out[i, j] += pairwise_similarity(w[i], w[j])
    return out / len(windows)


def test_window_similarity_matches_pairwise():
    rng = np.random.default_rng(0)
    windows = rng.normal(size=(5, 6, 4))
    windows[0, 2] = 0.0
    ref = _brute_matrix(windows)
    np.testing.assert_allclose(window_similarity(windows), ref, atol=1e-12)
    np.testing.assert_allclose(python_backend.window_similarity(windows), ref, atol=1e-12)


def _bank_fixture(t_len=40, n=4, h=2, seed=1):
    rng = np.random.default_rng(seed)
    series = make_series(rng.uniform(1, 9, size=(n, t_len)), td=4)
    frame = make_frame(n, t_len, td=4, weather=rng.integers(0, 3, size=t_len))
    return series, frame


def test_bank_single_and_pair_timestamps():
    series, frame = _bank_fixture()
    h = 2
    # slot value 3 starts at t = 3, 7, ...; restrict to the first 8 intervals -> ts {3}
    one = build_adjacency_bank(series.truncate(8), frame, h, ("slot",), train_end=8)
    z8 = (series.values[:, :8] - one.scale[0]) / one.scale[1]
    np.testing.assert_allclose(one.lookup("slot", 3), _brute_matrix(z8[None, :, 3:5]), atol=1e-12)
    two = build_adjacency_bank(series.truncate(12), frame, h, ("slot",), train_end=12)
    z12 = (series.values[:, :12] - two.scale[0]) / two.scale[1]
    ref = 0.5 * (_brute_matrix(z12[None, :, 3:5]) + _brute_matrix(z12[None, :, 7:9]))
    np.testing.assert_allclose(two.lookup("slot", 3), ref, atol=1e-12)


def test_bank_identical_regions_all_ones():
    row = np.random.default_rng(2).uniform(1, 5, size=40)
    series = make_series(np.tile(row, (3, 1)), td=4)
    frame = make_frame(3, 40, td=4)
    bank = build_adjacency_bank(series, frame, 2, ("dow", "slot"))
    for m in bank.matrices.values():
        np.testing.assert_allclose(m, np.ones((3, 3)), atol=1e-12)


def test_bank_invariants_and_missing_value():
    series, frame = _bank_fixture()
    bank = build_adjacency_bank(series, frame, 2)
    for m in bank.matrices.values():
        np.testing.assert_allclose(m, m.T, atol=1e-15)
        np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-12)
        assert m.min() >= 0 and m.max() <= 1 + 1e-12
    frame_w = make_frame(4, 40, td=4, n_weather=5)
    bank_w = build_adjacency_bank(series, frame_w, 2, ("weather",))
    with pytest.raises(MissingBankEntry):
        bank_w.lookup("weather", 4)
    assert "weather=4" in bank_w.meta["empty"]


def test_bank_respects_train_end_and_round_trip(tmp_path):
    series, frame = _bank_fixture()
    masked_late = series.with_mask(np.concatenate(
        [np.ones((4, 20), bool), np.zeros((4, 20), bool)], axis=1))
    a = build_adjacency_bank(series, frame, 2, train_end=20)
    b = build_adjacency_bank(masked_late, frame, 2, train_end=20)
    for key in a.matrices:
        np.testing.assert_array_equal(a.matrices[key], b.matrices[key])
    a.save(tmp_path / "bank.npz")
    c = AdjacencyBank.load(tmp_path / "bank.npz")
    assert c.factor_types == a.factor_types and c.scale == a.scale
    for key in a.matrices:
        np.testing.assert_array_equal(a.matrices[key], c.matrices[key])
    d = load_or_build_bank(tmp_path, series, frame, 2, train_end=20)
    e = load_or_build_bank(tmp_path, series, frame, 2, train_end=20)
    assert d.meta["key"] == e.meta["key"]


def test_interaction_examples():
    rng = np.random.default_rng(3)
    a = rng.random((3, 3))
    np.testing.assert_array_equal(interaction_adjacency([a]), a)
    b = a.copy()
    b[1, 2] = 0.0
    assert interaction_adjacency([a, b])[1, 2] == 0.0
    mats = rng.random((3, 3, 3))
    ref = np.array([[mats[0, i, j] * mats[1, i, j] * mats[2, i, j] for j in range(3)]
                    for i in range(3)])
    np.testing.assert_allclose(interaction_adjacency(mats), ref, rtol=1e-15)


def test_aggregation_weight_examples():
    segs = [np.ones(2), np.ones(3), np.ones(5)]
    g = aggregation_weights(segs, [np.zeros(2), np.zeros(3), np.zeros(5)]).data
    np.testing.assert_allclose(g, [1 / 3] * 3, rtol=1e-15)
    g = aggregation_weights([np.array([1.0]), np.array([1.0])],
                            [np.array([np.log(2.0)]), np.array([0.0])]).data
    np.testing.assert_allclose(g, [2 / 3, 1 / 3], rtol=1e-14)
    with pytest.raises(SegmentWidthMismatch):
        aggregation_weights([np.ones(2)], [np.ones(3)])


def test_aggregation_shift_invariance():
    rng = np.random.default_rng(4)
    c = [rng.normal(size=4), rng.normal(size=4)]
    s = [rng.normal(size=4), rng.normal(size=4)]
    g = aggregation_weights(c, s).data
    # a constant added to every logit: extra unit feature carrying the same weight
    c2 = [np.append(ci, 1.0) for ci in c]
    s2 = [np.append(si, 3.7) for si in s]
    np.testing.assert_allclose(aggregation_weights(c2, s2).data, g, rtol=1e-12)


def test_combine_examples():
    a = np.array([[1, .5], [.5, 1]])
    b = np.eye(2)
    out = combine_adjacency(np.stack([a, b]), np.array([.5, .25, .25]), normalize=False).data
    np.testing.assert_allclose(out, .5 * a + .25 * b + .25 * a * b, rtol=1e-15)
    one = combine_adjacency(a[None], np.array([.3, .7]), normalize=False).data
    np.testing.assert_allclose(one, a, atol=1e-15)
    norm = combine_adjacency(np.stack([a, b]), np.array([.5, .25, .25])).data
    np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-12)


def test_combine_per_node_weights_scale_rows():
    rng = np.random.default_rng(5)
    mats = rng.random((3, 4, 4))
    g = rng.dirichlet(np.ones(4), size=4)
    out = combine_adjacency(mats, g, normalize=False).data
    inter = mats.prod(axis=0)
    for i in range(4):
        ref = sum(g[i, k] * mats[k, i] for k in range(3)) + g[i, 3] * inter[i]
        np.testing.assert_allclose(out[i], ref, rtol=1e-14)


def test_status_network_examples():
    rng = np.random.default_rng(6)
    p = init_status_network(rng, 5, 4, 3, "B")
    for t in p.values():
        t.data = np.zeros(t.shape)
    np.testing.assert_array_equal(status_network(rng.normal(size=(2, 5)), p).data, np.zeros((2, 3)))
    w1 = np.eye(5, 4)
    w2 = rng.normal(size=(4, 3))
    p["w1"].data, p["w2"].data = w1, w2
    p["b1"].data = np.full(4, 0.1)
    c = rng.normal(size=(2, 5))
    ref = np.maximum(c @ w1 + 0.1, 0.0) @ w2
    np.testing.assert_allclose(status_network(c, p).data, ref, rtol=1e-14)


def _gnn_params(rng, width, h, k):
    return {"omega0": Tensor(rng.normal(size=(h, k)), True),
            "omega1": Tensor(rng.normal(size=(k, h)), True),
            "B0": init_status_network(rng, width, k, k, "B0"),
            "B1": init_status_network(rng, width, k, h, "B1")}


def _dense_reference(x, adj, c, p, alpha):
    def mlp(q):
        return np.maximum(c @ q["w1"].data + q["b1"].data, 0) @ q["w2"].data + q["b2"].data
    h1 = np.maximum(alpha * mlp(p["B0"]) + (1 - alpha) * adj @ x @ p["omega0"].data, 0)
    return alpha * mlp(p["B1"]) + (1 - alpha) * adj @ h1 @ p["omega1"].data


def test_gnn_matches_dense_reference():
    rng = np.random.default_rng(7)
    n, h, k, width = 5, 3, 6, 4
    p = _gnn_params(rng, width, h, k)
    x, c = rng.normal(size=(n, h)), rng.normal(size=(n, width))
    adj = rng.random((n, n))
    adj /= adj.sum(axis=1, keepdims=True)
    out = gnn_forward(x, adj, c, p, 0.5).data
    np.testing.assert_allclose(out, _dense_reference(x, adj, c, p, 0.5), rtol=1e-12)
    # alpha = 1 ignores the graph entirely
    a1 = gnn_forward(x, adj, c, p, 1.0).data
    a2 = gnn_forward(rng.normal(size=(n, h)), np.eye(n), c, p, 1.0).data
    np.testing.assert_array_equal(a1, a2)


def test_gnn_identity_propagation():
    rng = np.random.default_rng(8)
    n, h = 4, 64
    p = _gnn_params(rng, 3, h, h)
    p["omega0"].data = np.eye(h)
    p["omega1"].data = np.eye(h)
    x = np.abs(rng.normal(size=(n, h)))
    out = gnn_forward(x, np.eye(n), rng.normal(size=(n, 3)), p, 0.0).data
    np.testing.assert_allclose(out, x, rtol=1e-15)


def test_gnn_equivariance():
    rng = np.random.default_rng(9)
    n, h, k, width = 6, 3, 5, 4
    p = _gnn_params(rng, width, h, k)
    x, c, adj = rng.normal(size=(n, h)), rng.normal(size=(n, width)), rng.random((n, n))
    perm = rng.permutation(n)
    out = gnn_forward(x, adj, c, p).data
    out_p = gnn_forward(x[perm], adj[np.ix_(perm, perm)], c[perm], p).data
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12)


def test_gnn_gradient_chain():
    rng = np.random.default_rng(10)
    n, h, k, width = 4, 2, 3, 5
    p = _gnn_params(rng, width, h, k)
    s = [Tensor(rng.normal(size=2), True), Tensor(rng.normal(size=3), True),
         Tensor(rng.normal(size=5), True)]
    x, c = rng.normal(size=(n, h)), rng.normal(size=(n, width))
    mats = rng.random((2, n, n))

    def loss():
        g = aggregation_weights([c[:, :2], c[:, 2:], c], s)
        adj = combine_adjacency(mats, g)
        return ad.sum(ad.square(gnn_forward(x, adj, c, p)))

    flat = {"omega0": p["omega0"], "omega1": p["omega1"],
            **{f"B0.{k}": v for k, v in p["B0"].items()},
            **{f"B1.{k}": v for k, v in p["B1"].items()},
            **{f"S{i}": t for i, t in enumerate(s)}}
    report = ad.gradient_check(loss, flat)
    assert max(report.values()) < 1e-4
