from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import TOY_CAL, make_dataset
from raci import model as M
from raci import retrieval as R
from raci.retrieval import StalePoolError, build_neighbor_index
from raci.rng import stream


def _setup(cfg=None, sites=("a", "b", "c"), seed=0):
    cfg = cfg or M.RaciConfig(h=4, lstm_layers=2, dropout_p=0.0, k_neighbors=2, k_pca=2, tau=-0.5)
    ds = make_dataset(sites=sites, aux=(2002, 2004), test=(2003,))
    params = M.init_params(cfg, ds.dims, seed)
    std = M.Standardizer.fit(ds.split_samples("train"))
    nindex = build_neighbor_index(list(ds.sites.values()), cfg.k_neighbors)
    pool = M.build_pool(ds, params, std, cfg) if cfg.model == "raci" else None
    return ds, cfg, params, std, nindex, pool


# --- straight-line reference -----------------------------------------------------


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _softplus(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def _softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def _mlp(x, p, pre):
    return np.tanh(x @ p[pre + ".W1"] + p[pre + ".b1"]) @ p[pre + ".W2"] + p[pre + ".b2"]


def _gate(coarse, fine, p, pre):
    return fine + _softplus(float(_mlp(np.concatenate([coarse, fine]), p, pre)[0])) * coarse


def _monthly_state(sample, p, std, cal):
    h = p["enc_d.W2"].shape[1]
    ed = np.array([_mlp(row, p, "enc_d") for row in std.daily(sample.x_daily)])
    em = np.array([_mlp(row, p, "enc_m") for row in std.monthly(sample.x_monthly)])
    er = _mlp(std.regime(sample.x_regime), p, "enc_r")
    hm = np.zeros((12, h))
    for m in range(12):
        days = [d for d in range(cal.days_per_year) if cal.day_to_month[d] == m]
        q = em[m] @ p["agg_dm.Wq"]
        a = _softmax(np.array([(ed[d] @ p["agg_dm.Wk"]) @ q for d in days]) / math.sqrt(h))
        hm[m] = sum(a[i] * ed[d] for i, d in enumerate(days)) + em[m]
    q = er @ p["agg_my.Wq"]
    a = _softmax(np.array([(hm[m] @ p["agg_my.Wk"]) @ q for m in range(12)]) / math.sqrt(h))
    hy = sum(a[m] * hm[m] for m in range(12)) + er
    hmt = np.array([_gate(hy, hm[m], p, "gate_ym") for m in range(12)])
    return ed, hy, hmt


def _lstm_layer(x, p, pre):
    hid = p[pre + ".Wh"].shape[0]
    h = np.zeros(hid)
    c = np.zeros(hid)
    out = []
    for t in range(x.shape[0]):
        z = x[t] @ p[pre + ".Wx"] + h @ p[pre + ".Wh"] + p[pre + ".b"]
        i = np.array([_sig(v) for v in z[:hid]])
        f = np.array([_sig(v) for v in z[hid:2 * hid]])
        o = np.array([_sig(v) for v in z[2 * hid:3 * hid]])
        g = np.tanh(z[3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def reference_forward(key, ds, p, std, cfg, nindex, pool):
    cal = ds.calendar
    h = cfg.h
    ed, hy, hmt = _monthly_state(ds.samples[key], p, std, cal)
    nbrs = [(s, key[1]) for s in nindex.neighbors[key[0]] if (s, key[1]) in ds.samples]
    nb_hmt = [_monthly_state(ds.samples[k], p, std, cal)[2] for k in nbrs]
    hme = np.zeros_like(hmt)
    for m in range(12):
        q = hmt[m] @ p["ctx_m.Wq"]
        a = _softmax(np.array([(n[m] @ p["ctx_m.Wk"]) @ q for n in nb_hmt]) / math.sqrt(h))
        ctx = sum(a[i] * n[m] for i, n in enumerate(nb_hmt))
        hme[m] = _gate(ctx, hmt[m], p, "gate_ctx")
    cy = np.zeros(cal.days_per_year)
    sims = R.similarities(hy, pool)
    members = [i for i, k in enumerate(pool.keys) if sims[i] > pool.tau and k[1] != key[1]]
    if members:
        q = hy @ p["ret_y.Wq"]
        a = _softmax(np.array([(pool.embeddings[i] @ p["ret_y.Wk"]) @ q for i in members]) / math.sqrt(h))
        cy = sum(a[j] * pool.trajectories[i] for j, i in enumerate(members))
    x = np.array([np.append(_gate(hme[cal.day_to_month[d]], ed[d], p, "gate_md"), cy[d])
                  for d in range(cal.days_per_year)])
    for layer in range(cfg.lstm_layers):
        x = _lstm_layer(x, p, f"lstm{layer}")
    return x @ p["out.W"][:, 0] + p["out.b"][0]


def test_matches_straight_line_reference():
    ds, cfg, p, std, nindex, pool = _setup()
    keys = ds.splits["test"]
    yhat, diag = M.predict(p, ds, keys, std, cfg, pool, nindex)
    assert any(not r.fallback for d in diag for r in d.reports)
    for i, key in enumerate(keys):
        ref = reference_forward(key, ds, p, std, cfg, nindex, pool)
        np.testing.assert_allclose(yhat[i], ref, rtol=1e-12, atol=1e-13)


def test_zero_readout_gives_zero():
    ds, cfg, p, std, nindex, pool = _setup()
    p["out.W"][:] = 0.0
    p["out.b"][:] = 0.0
    pool = M.build_pool(ds, p, std, cfg)
    yhat, _ = M.predict(p, ds, ds.splits["test"], std, cfg, pool, nindex)
    assert np.all(yhat == 0.0)


def test_eval_mode_is_repeatable_and_train_mode_needs_rng():
    cfg = M.RaciConfig(h=4, lstm_layers=2, dropout_p=0.3, k_neighbors=2, k_pca=2, tau=-0.5)
    ds, cfg, p, std, nindex, pool = _setup(cfg)
    s = ds.samples[("a", 2003)]
    a, _ = M.predict_sample(s, ds, pool, nindex, p, std, cfg)
    b, _ = M.predict_sample(s, ds, pool, nindex, p, std, cfg)
    np.testing.assert_array_equal(a, b)
    c, _ = M.predict_sample(s, ds, pool, nindex, p, std, cfg, mode="train", rng=stream(0, "x"))
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        M.predict_sample(s, ds, pool, nindex, p, std, cfg, mode="bogus")


def test_zero_dropout_train_equals_eval():
    ds, cfg, p, std, nindex, pool = _setup()
    s = ds.samples[("b", 2003)]
    a, _ = M.predict_sample(s, ds, pool, nindex, p, std, cfg)
    b, _ = M.predict_sample(s, ds, pool, nindex, p, std, cfg, mode="train", rng=stream(1, "x"))
    np.testing.assert_array_equal(a, b)


# --- ablations ------------------------------------------------------------------------


def test_minus_yearly_equals_empty_pool():
    ds, cfg, p, std, nindex, pool = _setup()
    keys = ds.splits["test"]
    a, _ = M.predict(p, ds, keys, std, cfg.variant("-Yearly"), pool, nindex)
    b, _ = M.predict(p, ds, keys, std, cfg, R.empty_pool(ds.calendar.days_per_year, cfg.h), nindex)
    np.testing.assert_array_equal(a, b)


def test_tau_one_equals_minus_yearly():
    ds, cfg, p, std, nindex, _ = _setup()
    keys = ds.splits["test"]
    strict = M.build_pool(ds, p, std, M.RaciConfig(**{**cfg.to_dict(), "tau": 1.0}))
    a, diag = M.predict(p, ds, keys, std, cfg, strict, nindex)
    b, _ = M.predict(p, ds, keys, std, cfg.variant("-Yearly"), strict, nindex)
    assert all(r.fallback for d in diag for r in d.reports)
    np.testing.assert_array_equal(a, b)


def test_minus_both_is_composition():
    ds, cfg, p, std, nindex, pool = _setup()
    keys = ds.splits["test"]
    both, _ = M.predict(p, ds, keys, std, cfg.variant("-Both"), pool, nindex)
    composed = M.RaciConfig(**{**cfg.variant("-Monthly").to_dict(), "use_yearly_ctx": False})
    c, _ = M.predict(p, ds, keys, std, composed, pool, nindex)
    np.testing.assert_array_equal(both, c)
    no_nb, _ = M.predict(p, ds, keys, std, cfg.variant("-Yearly"), pool, None)
    np.testing.assert_array_equal(both, no_nb)


def test_temporal_ablation_uses_uniform_attention():
    ds, cfg, p, std, nindex, pool = _setup()
    cfg_t = cfg.variant("-Temporal")
    pool_t = M.build_pool(ds, p, std, cfg_t)
    _, diag = M.predict(p, ds, ds.splits["test"], std, cfg_t, pool_t, nindex)
    d = diag[0]
    np.testing.assert_allclose(d.alpha_d2m, 0.5)
    np.testing.assert_allclose(d.alpha_m2y, 1.0 / 12)
    np.testing.assert_array_equal(d.beta_m2d, 1.0)


# --- pools, dims, loss --------------------------------------------------------------


def test_stale_pool_detected():
    ds, cfg, p, std, nindex, pool = _setup()
    p2 = {k: v.copy() for k, v in p.items()}
    p2["out.b"] += 1.0
    with pytest.raises(StalePoolError):
        M.predict(p2, ds, ds.splits["test"], std, cfg, pool, nindex)


def test_check_dims_names_block():
    ds, cfg, p, *_ = _setup()
    dims = dict(ds.dims, daily=3)
    with pytest.raises(ValueError, match="daily"):
        M.check_dims(p, cfg, dims)
    dims = dict(ds.dims, static=5)
    with pytest.raises(ValueError, match="yearly\\+static"):
        M.check_dims(p, cfg, dims)
    M.check_dims(p, cfg, ds.dims)


def test_masked_mse_examples():
    assert M.masked_mse([1.0, 2.0], [1.0, 2.0], [1, 1]) == 0.0
    assert M.masked_mse([0.0, 5.0], [2.0, 0.0], [1, 0]) == 4.0
    with pytest.raises(ValueError, match="degenerate"):
        M.masked_mse([1.0], [2.0], [0])


def test_masked_mse_pools_positions():
    yhat = np.array([[1.0, 1.0], [3.0, 0.0]])
    y = np.zeros((2, 2))
    mask = np.array([[1, 0], [1, 1]])
    assert M.masked_mse(yhat, y, mask) == pytest.approx((1 + 9 + 0) / 3)


def test_standardizer_fit():
    ds = make_dataset()
    std = M.Standardizer.fit(ds.split_samples("train"))
    x = np.concatenate([std.daily(s.x_daily) for s in ds.split_samples("train")])
    np.testing.assert_allclose(x.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(x.std(0), 1.0, atol=1e-12)
    again = M.Standardizer.from_arrays(std.arrays())
    for k, v in std.arrays().items():
        np.testing.assert_array_equal(again.arrays()[k], v)
    with pytest.raises(ValueError):
        M.Standardizer.fit([])


def test_fingerprint_tracks_params():
    ds, cfg, p, std, *_ = _setup()
    f = M.fingerprint(p, std)
    assert M.fingerprint(p, std) == f
    p["out.b"] = p["out.b"] + 1e-15
    assert M.fingerprint(p, std) != f


def test_baseline_sees_replicated_inputs():
    cfg = M.RaciConfig(h=4, lstm_layers=1, dropout_p=0.0, model="lstm")
    ds = make_dataset()
    p = M.init_params(cfg, ds.dims, 0)
    std = M.Standardizer.fit(ds.split_samples("train"))
    assert p["lstm0.Wx"].shape[0] == 2 + 1 + 1 + 2
    ws = M.assemble(ds.splits["test"], ds, std, cfg)
    assert ws.x_rep.shape == (2, TOY_CAL.days_per_year, 6)
    yhat, _ = M.predict(p, ds, ds.splits["test"], std, cfg)
    assert yhat.shape == (2, TOY_CAL.days_per_year) and np.isfinite(yhat).all()


def test_working_set_includes_same_year_neighbors():
    ds, cfg, p, std, nindex, _ = _setup()
    ws = M.assemble([("a", 2003)], ds, std, cfg, nindex)
    assert ws.keys[0] == ("a", 2003)
    assert set(ws.keys[1:]) == {("b", 2003), ("c", 2003)}
    assert ws.nb_valid.all()


def test_config_validation():
    with pytest.raises(ValueError):
        M.RaciConfig(tau=-1.0)
    with pytest.raises(ValueError):
        M.RaciConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        M.RaciConfig(model="gru")
    cfg = M.RaciConfig(h=8)
    assert M.RaciConfig.from_dict(cfg.to_dict()) == cfg
