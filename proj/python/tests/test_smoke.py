import math

import numpy as np
import pytest

import kromhc


def test_permutations_identity_first():
    p = kromhc.permutations(3)
    assert p.shape == (6, 3, 3)
    np.testing.assert_array_equal(p[0], np.eye(3))
    assert np.all(p.sum(axis=1) == 1) and np.all(p.sum(axis=2) == 1)


def test_kron_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(kromhc.kron(a, b), np.kron(a, b), atol=1e-14)
    u1, u2 = rng.random((2, 2)), rng.random((3, 3))
    np.testing.assert_allclose(kromhc.kron_chain([u1, u2]), np.kron(u2, u1), atol=1e-14)


def test_sinkhorn_and_diagnostics():
    rng = np.random.default_rng(1)
    m = kromhc.sinkhorn_knopp(rng.normal(size=(4, 4)), 200)
    d = kromhc.ds_diagnostics(m)
    assert d["max_deviation"] < 1e-10
    assert kromhc.spectral_norm(m) <= 1 + 1e-8


def test_kromhc_maps_exactly_doubly_stochastic():
    rng = np.random.default_rng(2)
    h_res, h_pre, h_post = kromhc.layer_maps("kromhc", rng.normal(size=(8, 16)), seed=3, sigma=0.5)
    assert h_res.shape == (8, 8)
    np.testing.assert_allclose(h_res.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(h_res.sum(axis=1), 1.0, atol=1e-12)
    assert h_res.min() >= 0.0
    assert h_pre.shape == (1, 8) and h_post.shape == (1, 8)


def test_param_counts():
    assert kromhc.param_report("kromhc", 4, 384, 6, [2, 2])["reported_k"] == 240
    assert kromhc.param_count("mhc", 4, 384) == 38427
    with pytest.raises(kromhc.CapacityError):
        kromhc.param_count("mhclite", 16, 8)


def test_stability_scan_and_gradcheck():
    rows = kromhc.stability_scan("kromhc", 4, 16, 8, [1, 2])
    assert len(rows) == 8 and max(r["col_mae"] for r in rows) < 1e-12
    assert kromhc.layer_grad_check("kromhc") < 1e-5


def test_bpb():
    assert kromhc.bpb(math.log(2), 10, 10) == 1.0
    with pytest.raises(kromhc.UsageError):
        kromhc.bpb(1.0, 10, 0)


def test_short_training_is_deterministic():
    kwargs = dict(scheme="kromhc", n=4, C=16, D=1, steps=5, seq_len=8, vocab_size=8, seed=3)
    a, b = kromhc.train(**kwargs), kromhc.train(**kwargs)
    assert [r["ce_loss"] for r in a] == [r["ce_loss"] for r in b]
    assert a[0]["ce_loss"] == pytest.approx(math.log(8), abs=1e-12)
    with pytest.raises(kromhc.ConfigError):
        kromhc.train(scheme="residual", n=4)
