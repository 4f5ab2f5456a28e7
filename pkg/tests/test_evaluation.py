from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TOY_CAL, make_dataset
from raci import evaluation as E
from raci import model as M
from raci import training as T
from raci.core import Dataset, SiteMeta
from raci.retrieval import empty_pool

TINY = M.RaciConfig(h=4, lstm_layers=1, dropout_p=0.0, k_neighbors=1, k_pca=2, tau=0.0)


def brute_r2(sites, preds, obs, masks):
    """Double loop over every (site, step) pair."""
    labels = sorted(set(sites))
    num = den = 0.0
    for s in labels:
        vals = [obs[i][t] for i in range(len(sites)) if sites[i] == s
                for t in range(len(obs[i])) if masks[i][t]]
        if not vals:
            continue
        mean = sum(vals) / len(vals)
        d = sum((v - mean) ** 2 for v in vals)
        if d == 0.0:
            continue
        for i in range(len(sites)):
            if sites[i] != s:
                continue
            for t in range(len(obs[i])):
                if masks[i][t]:
                    num += (obs[i][t] - preds[i][t]) ** 2
        den += d
    return 1.0 - num / den


# --- metrics ----------------------------------------------------------------------


def test_rmse_examples():
    assert E.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert E.rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
    assert E.rmse([0.0, 0.0, 100.0], [0.0, 0.0, 0.0], [1, 1, 0]) == 0.0
    with pytest.raises(E.UndefinedMetricError):
        E.rmse([1.0], [1.0], [0])


def test_rmse_order_invariant():
    rng = np.random.default_rng(0)
    p, o = rng.normal(size=50), rng.normal(size=50)
    m = rng.random(50) > 0.3
    perm = rng.permutation(50)
    assert E.rmse(p, o, m) == pytest.approx(E.rmse(p[perm], o[perm], m[perm]), rel=1e-14)


def test_r2_hand_case():
    r2 = E.within_site_r2(["A", "B"], [[0.0, 0.0], [11.0, 11.0]], [[0.0, 2.0], [10.0, 12.0]])
    assert r2 == pytest.approx(-0.5, abs=1e-15)


def test_r2_perfect_and_site_mean():
    obs = np.array([[1.0, 3.0], [5.0, 9.0]])
    assert E.within_site_r2(["a", "b"], obs, obs) == 1.0
    means = np.repeat(obs.mean(1, keepdims=True), 2, axis=1)
    assert E.within_site_r2(["a", "b"], means, obs) == pytest.approx(0.0, abs=1e-15)


def test_r2_skips_flat_sites():
    obs = np.array([[1.0, 1.0], [0.0, 2.0]])
    pred = np.array([[5.0, 5.0], [0.0, 2.0]])
    r2, skipped = E.within_site_r2(["flat", "b"], pred, obs, return_skipped=True)
    assert r2 == 1.0 and skipped == 1
    with pytest.raises(E.UndefinedMetricError):
        E.within_site_r2(["a"], [[0.0, 0.0]], [[1.0, 1.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_r2_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_sites = int(rng.integers(1, 11))
    rows = int(rng.integers(n_sites, 2 * n_sites + 1))
    sites = [f"s{i % n_sites}" for i in range(rows)]
    steps = int(rng.integers(2, 8))
    obs = rng.normal(size=(rows, steps))
    preds = obs + rng.normal(scale=0.5, size=(rows, steps))
    masks = rng.random((rows, steps)) > 0.2
    masks[:, 0] = True
    masks[:, 1] = True
    got = E.within_site_r2(sites, preds, obs, masks)
    assert abs(got - brute_r2(sites, preds.tolist(), obs.tolist(), masks.tolist())) <= 1e-12


# --- evaluate ------------------------------------------------------------------------


def _tagged(tags=("north", "south")):
    ds = make_dataset(sites=("a", "b"))
    sites = {s: SiteMeta(m.site_id, m.lat, m.lon, tags[i]) for i, (s, m) in enumerate(sorted(ds.sites.items()))}
    return Dataset(sites, ds.samples, ds.splits, ds.calendar)


def test_group_additivity_and_single_group():
    ds = _tagged()
    st_ = T.train(ds, TINY, T.TrainConfig(epochs=1, batch_size=2))
    rep = E.evaluate(st_, ds)
    assert set(rep.groups) == {"north", "south"}
    total = sum(g.sse for g in rep.groups.values())
    n = sum(g.n_obs for g in rep.groups.values())
    assert np.sqrt(total / n) == pytest.approx(rep.rmse, rel=1e-14)
    one = _tagged(("x", "x"))
    rep1 = E.evaluate(st_, one)
    assert rep1.groups["x"].rmse == pytest.approx(rep1.rmse, rel=1e-14)
    assert rep1.groups["x"].r2 == pytest.approx(rep1.r2, rel=1e-14)


def test_self_evaluation_is_perfect():
    ds = make_dataset()
    keys = ds.splits["test"]
    y = np.stack([ds.samples[k].y for k in keys])
    pred = E.Predictions(keys, y.copy(), y, np.ones_like(y, dtype=bool), [], None)
    rep = E.metrics_from_predictions(pred, ds)
    assert rep.rmse == 0.0 and rep.r2 == 1.0


def test_evaluate_is_deterministic_and_reports(tmp_path):
    ds = make_dataset()
    st_ = T.train(ds, TINY, T.TrainConfig(epochs=1, batch_size=2))
    a, b = E.evaluate(st_, ds), E.evaluate(st_, ds)
    assert a.to_dict() == b.to_dict()
    assert a.provenance["split"] == "test"
    assert 0.0 <= a.fallback_rate <= 1.0
    a.write(tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["rmse"] == a.rmse
    rows = list(csv.reader(io.StringIO((tmp_path / "metrics.csv").read_text())))
    assert rows[0] == ["group", "rmse", "r2", "n_sites", "n_skipped"]
    assert "within-site R2" in (tmp_path / "metrics.txt").read_text()


def test_empty_split_rejected():
    ds = make_dataset(test=())
    st_ = T.train(ds, TINY, T.TrainConfig(epochs=1, batch_size=2))
    with pytest.raises(ValueError, match="empty"):
        E.evaluate(st_, ds)


def test_minus_yearly_row_equals_empty_pool():
    ds = make_dataset()
    st_ = T.train(ds, TINY.variant("-Yearly"), T.TrainConfig(epochs=1, batch_size=2))
    rep = E.evaluate(st_, ds)
    full_state = T.RunState(TINY, st_.train_config, st_.params, st_.standardizer, st_.m, st_.v)
    pred = E.collect_predictions(full_state, ds, pool=empty_pool(TOY_CAL.days_per_year, TINY.h))
    rep2 = E.metrics_from_predictions(pred, ds)
    assert rep.rmse == rep2.rmse and rep.r2 == rep2.r2


# --- ablation and sweep ------------------------------------------------------------------


def test_ablation_table_shape_and_reproducible():
    ds = make_dataset()
    tcfg = T.TrainConfig(epochs=1, batch_size=2)
    a = E.ablation_suite(ds, TINY, tcfg)
    b = E.ablation_suite(ds, TINY, tcfg)
    assert a.to_csv() == b.to_csv()
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert rows[0] == ["metric", "Full", "-Temporal", "-Monthly", "-Yearly", "-Both"]
    assert [r[0] for r in rows[1:]] == ["rmse", "r2"]


def test_sweep_shares_default_cell():
    ds = make_dataset(sites=("a", "b", "c"), aux=(2002, 2004))
    base = M.RaciConfig(h=4, lstm_layers=1, dropout_p=0.0, k_neighbors=1, k_pca=2, tau=0.5)
    res = E.sensitivity_sweep(ds, base, T.TrainConfig(epochs=1, batch_size=3), taus=(0.0, 0.5),
                              k_pcas=(1, 2))
    tau_rows = {r.value: r for r in res.sub_table("tau")}
    k_rows = {r.value: r for r in res.sub_table("k_pca")}
    assert (tau_rows[0.5].rmse, tau_rows[0.5].r2) == (k_rows[2.0].rmse, k_rows[2.0].r2)
    assert res.to_csv().splitlines()[0] == "knob,value,tau,k_pca,rmse,r2"


def test_single_value_sweep_equals_plain_run():
    ds = make_dataset()
    tcfg = T.TrainConfig(epochs=1, batch_size=2)
    res = E.sensitivity_sweep(ds, TINY, tcfg, taus=(0.0,), k_pcas=())
    plain = E.evaluate(T.train(ds, TINY, tcfg), ds)
    assert len(res.rows) == 1
    assert res.rows[0].rmse == plain.rmse and res.rows[0].r2 == plain.r2


# --- attention export --------------------------------------------------------------------


def test_pearson_constant_flag():
    assert E.pearson(np.ones(5), np.arange(5.0)) == (0.0, True)
    r, flag = E.pearson(np.arange(5.0), 2 * np.arange(5.0) + 1)
    assert r == pytest.approx(1.0) and not flag


def test_uniform_attention_gives_zero_correlations(tmp_path):
    ds = make_dataset()
    st_ = T.train(ds, TINY, T.TrainConfig(epochs=1, batch_size=2))
    st_.params["agg_dm.Wq"][:] = 0.0
    st_.params["agg_dm.Wk"][:] = 0.0
    exp = E.export_attention(st_, ds, ("a", 2003))
    np.testing.assert_allclose(exp.alpha_d2m, 0.5)
    assert all(v == (0.0, True) for v in exp.correlations.values())
    paths = exp.write(tmp_path, ds.calendar)
    assert len(paths) == 4
    rows = list(csv.DictReader(io.StringIO(paths[0].read_text())))
    sums = {}
    for r in rows:
        sums[r["month"]] = sums.get(r["month"], 0.0) + float(r["alpha_d2m"])
    assert all(v == pytest.approx(1.0) for v in sums.values())


def test_exported_alpha_sums_to_one():
    ds = make_dataset()
    st_ = T.train(ds, TINY, T.TrainConfig(epochs=1, batch_size=2))
    exp = E.export_attention(st_, ds, ("b", 2003))
    months = np.add.reduceat(exp.alpha_d2m, ds.calendar.month_starts)
    np.testing.assert_allclose(months, 1.0, rtol=1e-12)
    assert exp.alpha_m2y.sum() == pytest.approx(1.0)
    assert not exp.fallback and exp.retrieval
    with pytest.raises(KeyError):
        E.export_attention(st_, ds, ("zz", 2003))


def test_attention_proportional_to_precip_correlates():
    rng = np.random.default_rng(0)
    precip = rng.exponential(size=(12, 2))
    precip /= precip.sum(axis=1, keepdims=True)  # equal monthly totals
    x_daily = np.stack([rng.normal(size=24), precip.ravel()], axis=1)
    alpha = precip.ravel()  # already normalized within each month
    corr = E.attention_correlations(alpha, x_daily, ["tair", "precip"])
    assert corr["precip"][0] == pytest.approx(1.0, abs=1e-12)
