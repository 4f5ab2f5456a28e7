from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_dataset
from raci import storage as S
from raci import training as T
from raci.core import SiteYearSample
from raci.model import RaciConfig
from raci.synthetic import GeneratorConfig, build_benchmark

TINY = RaciConfig(h=4, lstm_layers=1, dropout_p=0.0, k_neighbors=1, k_pca=2, tau=0.0)


@pytest.fixture
def saved(tmp_path, small_benchmark):
    S.save_dataset(small_benchmark, tmp_path / "ds")
    return tmp_path / "ds"


def test_dataset_round_trip_is_bitwise(saved, small_benchmark):
    back = S.load_dataset(saved)
    assert back.equals(small_benchmark)
    for k, s in small_benchmark.samples.items():
        assert back.samples[k].y.tobytes() == s.y.tobytes()
        assert back.samples[k].x_daily.tobytes() == s.x_daily.tobytes()
    assert back.feature_names == small_benchmark.feature_names


def test_awkward_floats_round_trip(tmp_path):
    ds = make_dataset()
    k = ("a", 2000)
    s = ds.samples[k]
    y = s.y.copy()
    y[:4] = [0.1 + 0.2, 1e-300, -5e-324, 1.7976931348623157e308]
    ds.samples[k] = SiteYearSample(s.site_id, s.year, s.x_daily, s.x_monthly, s.x_yearly, s.x_static, y, s.mask)
    S.save_dataset(ds, tmp_path / "d")
    assert S.load_dataset(tmp_path / "d").samples[k].y.tobytes() == y.tobytes()


def test_masked_days_round_trip(tmp_path):
    ds = make_dataset()
    k = ("b", 2001)
    s = ds.samples[k]
    mask = s.mask.copy()
    mask[::3] = False
    y = np.where(mask, s.y, 0.0)
    ds.samples[k] = SiteYearSample(s.site_id, s.year, s.x_daily, s.x_monthly, s.x_yearly, s.x_static, y, mask)
    S.save_dataset(ds, tmp_path / "d")
    back = S.load_dataset(tmp_path / "d").samples[k]
    assert np.array_equal(back.mask, mask) and np.array_equal(back.y, y)


def test_manifest_contents(saved):
    man = S.read_manifest(saved)
    assert man["format"] == S.DATASET_FORMAT
    assert man["dims"] == {"daily": 2, "monthly": 1, "yearly": 1, "static": 3}
    assert "rng" in man
    header = (saved / "daily.csv").read_text().splitlines()[0]
    assert header == "site_id,year,day,tair,precip,target,mask"


def test_daily_width_mismatch_names_table(saved):
    man = json.loads((saved / "manifest.json").read_text())
    man["dims"]["daily"] = 3
    man["feature_names"]["daily"].append("extra")
    (saved / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(S.DatasetLoadError, match="daily.csv"):
        S.load_dataset(saved)


def test_missing_file_and_bad_rows(saved):
    (saved / "yearly.csv").unlink()
    with pytest.raises(S.DatasetLoadError, match="yearly.csv"):
        S.load_dataset(saved)


def test_bad_value_names_row(saved):
    lines = (saved / "monthly.csv").read_text().splitlines()
    parts = lines[5].split(",")
    parts[-1] = "abc"
    lines[5] = ",".join(parts)
    (saved / "monthly.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(S.DatasetLoadError, match=r"monthly.csv: row 6"):
        S.load_dataset(saved)


def test_split_key_without_sample(saved):
    man = json.loads((saved / "manifest.json").read_text())
    man["splits"]["test"].append(["ghost", 2003])
    (saved / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(S.DatasetLoadError, match="splits.test"):
        S.load_dataset(saved)


def test_empty_auxiliary_split_loads_but_train_rejects(saved):
    man = json.loads((saved / "manifest.json").read_text())
    man["splits"]["auxiliary"] = []
    (saved / "manifest.json").write_text(json.dumps(man))
    ds = S.load_dataset(saved)
    assert len(ds.splits["auxiliary"]) == 0
    with pytest.raises(ValueError, match="auxiliary"):
        T.train(ds, TINY, T.TrainConfig(epochs=1))


def test_generator_record_kept(tmp_path):
    gen = GeneratorConfig(rows=2, cols=2, first_year=2000, last_year=2003, n_test_years=1,
                          days_per_year=24, month_lengths=(2,) * 12)
    S.save_dataset(build_benchmark(gen), tmp_path / "g", generator=gen.to_dict())
    man = S.read_manifest(tmp_path / "g")
    assert GeneratorConfig.from_dict(man["generator"]) == gen


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path, toy_dataset):
    st = T.train(toy_dataset, TINY, T.TrainConfig(epochs=2, batch_size=2, seed=3))
    path = S.save_checkpoint(st, tmp_path / "c" / "x.ckpt")
    back = S.load_checkpoint(path)
    assert S.states_equal(st, back)
    assert back.fingerprint() == st.fingerprint()
    cont_a = T.train(toy_dataset, TINY, T.TrainConfig(epochs=1, batch_size=2, seed=3), state=st)
    cont_b = T.train(toy_dataset, TINY, T.TrainConfig(epochs=1, batch_size=2, seed=3), state=back)
    assert S.states_equal(cont_a, cont_b)


def test_checkpoint_corruption_detected(tmp_path, toy_dataset):
    st = T.train(toy_dataset, TINY, T.TrainConfig(epochs=1, batch_size=2))
    path = S.save_checkpoint(st, tmp_path / "x.ckpt")
    lines = path.read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("param out.b"))
    lines[idx + 1] = "0.123"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(S.CheckpointError, match="fingerprint"):
        S.load_checkpoint(path)
    with pytest.raises(S.CheckpointError, match="missing"):
        S.load_checkpoint(tmp_path / "nope.ckpt")


def test_run_directory_files(tmp_path, toy_dataset):
    st = T.train(toy_dataset, TINY, T.TrainConfig(epochs=2, batch_size=2))
    run = S.RunDirectory(tmp_path / "run")
    run.write_config({"model": TINY.to_dict()})
    run.write_seed(7)
    p = run.write_loss_history(st.loss_history)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,loss,fallback_rate,pool_fingerprint"
    assert len(lines) == 3
    assert json.loads((tmp_path / "run" / "seed.json").read_text())["seed"] == 7
    assert run.checkpoint_path().name == "final.ckpt"
