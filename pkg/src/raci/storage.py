"""Dataset directories, checkpoints and run directories on disk.

Dataset directory layout::

    manifest.json   calendar, dimensions, feature names, split listing, RNG declaration
    sites.csv       site_id, lat, lon, region_tag, <static features>
    daily.csv       site_id, year, day, <daily features>, target, mask
    monthly.csv     site_id, year, month, <monthly features>
    yearly.csv      site_id, year, <yearly features>

Floats are written with ``%.17g`` so a save/load cycle is bitwise exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import BLOCKS, SPLITS, CalendarSpec, Dataset, DatasetError, Key, SiteMeta, SiteYearSample
from .model import RaciConfig, Standardizer
from .rng import RNG_DECLARATION

DATASET_FORMAT = "raci-dataset/1"
CHECKPOINT_FORMAT = "raci-checkpoint/1"


class DatasetLoadError(DatasetError):
    pass


class CheckpointError(ValueError):
    pass


def fmt(x) -> str:
    return "%.17g" % float(x)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _site_static(ds: Dataset) -> Dict[str, Optional[np.ndarray]]:
    out: Dict[str, Optional[np.ndarray]] = {sid: None for sid in ds.sites}
    for key, s in sorted(ds.samples.items()):
        prev = out.get(s.site_id)
        if prev is None:
            out[s.site_id] = s.x_static
        elif not np.array_equal(prev, s.x_static, equal_nan=True):
            raise DatasetError(f"site {s.site_id}: static features differ between years")
    return out


def save_dataset(ds: Dataset, path, generator: Optional[dict] = None) -> Path:
    """Write ``ds`` as a dataset directory (created if needed)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = ds.feature_names
    cal = ds.calendar
    manifest = {
        "format": DATASET_FORMAT,
        "calendar": {"days_per_year": cal.days_per_year, "month_lengths": list(cal.month_lengths)},
        "dims": ds.dims,
        "feature_names": {b: list(names[b]) for b in BLOCKS},
        "splits": {s: [[k[0], k[1]] for k in ds.splits[s]] for s in SPLITS},
        "rng": RNG_DECLARATION,
    }
    if generator is not None:
        manifest["generator"] = generator
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    static = _site_static(ds)
    d_static = ds.dims["static"]
    site_rows = []
    for sid in sorted(ds.sites):
        meta = ds.sites[sid]
        vals = static[sid]
        cells = [fmt(v) for v in vals] if vals is not None else [""] * d_static
        site_rows.append([sid, fmt(meta.lat), fmt(meta.lon), meta.region_tag or "", *cells])
    _write_rows(root / "sites.csv", ["site_id", "lat", "lon", "region_tag", *names["static"]], site_rows)

    keys = sorted(ds.samples)

    def daily_rows():
        for k in keys:
            s = ds.samples[k]
            for d in range(cal.days_per_year):
                yield [k[0], str(k[1]), str(d), *(fmt(v) for v in s.x_daily[d]), fmt(s.y[d]),
                       "1" if s.mask[d] else "0"]

    def monthly_rows():
        for k in keys:
            s = ds.samples[k]
            for m in range(12):
                yield [k[0], str(k[1]), str(m), *(fmt(v) for v in s.x_monthly[m])]

    _write_rows(root / "daily.csv", ["site_id", "year", "day", *names["daily"], "target", "mask"], daily_rows())
    _write_rows(root / "monthly.csv", ["site_id", "year", "month", *names["monthly"]], monthly_rows())
    _write_rows(root / "yearly.csv", ["site_id", "year", *names["yearly"]],
                ([k[0], str(k[1]), *(fmt(v) for v in ds.samples[k].x_yearly)] for k in keys))
    return root


def _read_table(path: Path, expected_header: Sequence[str]) -> List[Tuple[int, List[str]]]:
    if not path.exists():
        raise DatasetLoadError(f"{path.name}: file missing")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetLoadError(f"{path.name}: empty file, header row missing") from None
        if list(header) != list(expected_header):
            raise DatasetLoadError(
                f"{path.name}: row 1: header has {len(header)} columns {header}, "
                f"manifest implies {len(expected_header)} columns {list(expected_header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise DatasetLoadError(
                    f"{path.name}: row {lineno}: {len(row)} columns, expected {len(expected_header)}")
            rows.append((lineno, row))
    return rows


def _floats(cells, fname: str, lineno: int) -> List[float]:
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise DatasetLoadError(f"{fname}: row {lineno}: {exc}") from None


def _int(cell, fname: str, lineno: int, what: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise DatasetLoadError(f"{fname}: row {lineno}: {what} {cell!r} is not an integer") from None


def load_dataset(path) -> Dataset:
    """Read a dataset directory; errors name the offending file and row."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetLoadError(f"manifest.json: file missing in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        cal = CalendarSpec(int(manifest["calendar"]["days_per_year"]),
                           tuple(manifest["calendar"]["month_lengths"]))
        names = {b: tuple(manifest["feature_names"][b]) for b in BLOCKS}
        dims = {b: int(manifest["dims"][b]) for b in BLOCKS}
        split_lists = {s: [(str(a), int(b)) for a, b in manifest["splits"].get(s, [])] for s in SPLITS}
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetLoadError(f"manifest.json: malformed ({exc})") from None
    for b in BLOCKS:
        if dims[b] != len(names[b]):
            raise DatasetLoadError(
                f"manifest.json: {b} dimension {dims[b]} but {len(names[b])} feature names")
    days = cal.days_per_year

    sites: Dict[str, SiteMeta] = {}
    static: Dict[str, Optional[np.ndarray]] = {}
    fname = "sites.csv"
    for lineno, row in _read_table(root / fname, ["site_id", "lat", "lon", "region_tag", *names["static"]]):
        sid = row[0]
        if sid in sites:
            raise DatasetLoadError(f"{fname}: row {lineno}: duplicate site_id {sid!r}")
        lat, lon = _floats(row[1:3], fname, lineno)
        try:
            sites[sid] = SiteMeta(sid, lat, lon, row[3] or None)
        except ValueError as exc:
            raise DatasetLoadError(f"{fname}: row {lineno}: {exc}") from None
        cells = row[4:]
        static[sid] = None if cells and all(c == "" for c in cells) else np.array(_floats(cells, fname, lineno))

    daily: Dict[Key, Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
    fname = "daily.csv"
    for lineno, row in _read_table(root / fname, ["site_id", "year", "day", *names["daily"], "target", "mask"]):
        key = (row[0], _int(row[1], fname, lineno, "year"))
        day = _int(row[2], fname, lineno, "day")
        if row[0] not in sites:
            raise DatasetLoadError(f"{fname}: row {lineno}: unknown site_id {row[0]!r}")
        if not 0 <= day < days:
            raise DatasetLoadError(f"{fname}: row {lineno}: day {day} outside [0, {days})")
        if key not in daily:
            daily[key] = (np.full((days, dims["daily"]), np.nan), np.full(days, np.nan),
                          np.zeros(days, dtype=bool), np.zeros(days, dtype=bool))
        xd, y, mask, seen = daily[key]
        if seen[day]:
            raise DatasetLoadError(f"{fname}: row {lineno}: duplicate day {day} for {key}")
        vals = _floats(row[3:3 + dims["daily"] + 1], fname, lineno)
        xd[day] = vals[:-1]
        y[day] = vals[-1]
        if row[-1] not in ("0", "1"):
            raise DatasetLoadError(f"{fname}: row {lineno}: mask must be 0 or 1, got {row[-1]!r}")
        mask[day] = row[-1] == "1"
        seen[day] = True

    monthly: Dict[Key, Tuple[np.ndarray, np.ndarray]] = {}
    fname = "monthly.csv"
    for lineno, row in _read_table(root / fname, ["site_id", "year", "month", *names["monthly"]]):
        key = (row[0], _int(row[1], fname, lineno, "year"))
        month = _int(row[2], fname, lineno, "month")
        if not 0 <= month < 12:
            raise DatasetLoadError(f"{fname}: row {lineno}: month {month} outside [0, 12)")
        xm, seen = monthly.setdefault(key, (np.full((12, dims["monthly"]), np.nan), np.zeros(12, dtype=bool)))
        if seen[month]:
            raise DatasetLoadError(f"{fname}: row {lineno}: duplicate month {month} for {key}")
        xm[month] = _floats(row[3:], fname, lineno)
        seen[month] = True

    yearly: Dict[Key, np.ndarray] = {}
    fname = "yearly.csv"
    for lineno, row in _read_table(root / fname, ["site_id", "year", *names["yearly"]]):
        key = (row[0], _int(row[1], fname, lineno, "year"))
        if key in yearly:
            raise DatasetLoadError(f"{fname}: row {lineno}: duplicate row for {key}")
        yearly[key] = np.array(_floats(row[2:], fname, lineno))

    samples: Dict[Key, SiteYearSample] = {}
    for key in sorted(daily):
        xd, y, mask, seen = daily[key]
        if not seen.all():
            raise DatasetLoadError(f"daily.csv: {key} has {int(seen.sum())} of {days} days")
        if key not in monthly or not monthly[key][1].all():
            raise DatasetLoadError(f"monthly.csv: {key} is missing monthly rows")
        if key not in yearly:
            raise DatasetLoadError(f"yearly.csv: no row for {key}")
        st = static.get(key[0])
        if st is None:
            raise DatasetLoadError(f"sites.csv: site {key[0]!r} has no static features")
        samples[key] = SiteYearSample(key[0], key[1], xd, monthly[key][0], yearly[key], st, y, mask)
    for key in sorted(set(monthly) - set(daily)):
        raise DatasetLoadError(f"monthly.csv: {key} has no daily rows")
    for key in sorted(set(yearly) - set(daily)):
        raise DatasetLoadError(f"yearly.csv: {key} has no daily rows")
    for s in SPLITS:
        for i, key in enumerate(split_lists[s]):
            if key not in samples:
                raise DatasetLoadError(
                    f"manifest.json: splits.{s}[{i}] lists {key} but no sample exists for it")
    return Dataset(sites, samples, split_lists, cal, names)


def read_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _array_lines(group: str, arrays: Dict[str, np.ndarray]) -> List[str]:
    out = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        shape = ",".join(str(s) for s in a.shape)
        out.append(f"{group} {name} {shape}")
        out.append(" ".join(fmt(v) for v in a.ravel(order="C")))
    return out


def save_checkpoint(state, path) -> Path:
    """Write a :class:`~raci.training.RunState` as a text checkpoint.

    Line 1 is a JSON header; then every array is a ``group name shape`` line
    followed by its row-major values.
    """
    from .training import RunState  # noqa: F401  (type only)

    header = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "seed": state.seed,
        "fingerprint": state.fingerprint(),
        "step": state.step,
        "epoch": state.epoch,
        "pool_fingerprint": state.pool_fingerprint,
        "loss_history": state.loss_history,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += _array_lines("param", state.params)
    lines += _array_lines("adam_m", state.m)
    lines += _array_lines("adam_v", state.v)
    lines += _array_lines("std", state.standardizer.arrays())
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def load_checkpoint(path):
    from .training import RunState, TrainConfig

    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"{p}: checkpoint file missing")
    lines = p.read_text(encoding="utf-8").split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p.name}: line 1: header is not JSON ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{p.name}: unknown format {header.get('format')!r}")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "std": {}}
    i = 1
    while i < len(lines) and lines[i]:
        parts = lines[i].split(" ")
        if len(parts) != 3 or parts[0] not in groups or i + 1 >= len(lines):
            raise CheckpointError(f"{p.name}: line {i + 1}: malformed array header")
        group, name, shape_txt = parts
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        vals = np.array([float(v) for v in lines[i + 1].split(" ")] if lines[i + 1] else [], dtype=np.float64)
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"{p.name}: line {i + 2}: {vals.size} values for shape {shape}")
        groups[group][name] = vals.reshape(shape)
        i += 2
    state = RunState(
        config=RaciConfig.from_dict(header["config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=groups["param"],
        standardizer=Standardizer.from_arrays(groups["std"]),
        m=groups["adam_m"], v=groups["adam_v"],
        step=int(header["step"]), epoch=int(header["epoch"]),
        loss_history=list(header["loss_history"]),
        pool_fingerprint=header.get("pool_fingerprint", ""),
    )
    if state.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{p.name}: fingerprint mismatch; file is corrupt")
    return state


def states_equal(a, b) -> bool:
    def same(d1, d2):
        return d1.keys() == d2.keys() and all(
            a1.shape == d2[k].shape and a1.tobytes() == d2[k].tobytes() for k, a1 in d1.items())

    return (a.config == b.config and a.train_config == b.train_config and a.step == b.step
            and a.epoch == b.epoch and same(a.params, b.params) and same(a.m, b.m) and same(a.v, b.v)
            and same(a.standardizer.arrays(), b.standardizer.arrays())
            and json.dumps(a.loss_history, sort_keys=True) == json.dumps(b.loss_history, sort_keys=True))


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


class RunDirectory:
    """Artifacts of one CLI invocation: config snapshot, seed record, checkpoints, logs, metrics."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def export_dir(self) -> Path:
        return self.path / "exports"

    def checkpoint_path(self, tag: str = "final") -> Path:
        return self.checkpoint_dir / f"{tag}.ckpt"

    def write_config(self, resolved: dict) -> Path:
        p = self.path / "config.json"
        p.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_seed(self, seed: int, extra: Optional[dict] = None) -> Path:
        rec = {"seed": int(seed), "rng": RNG_DECLARATION, **(extra or {})}
        p = self.path / "seed.json"
        p.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def write_loss_history(self, history: Sequence[dict]) -> Path:
        p = self.path / "loss_history.csv"
        _write_rows(p, ["epoch", "loss", "fallback_rate", "pool_fingerprint"],
                    ([str(r["epoch"]), fmt(r["loss"]), fmt(r["fallback_rate"]), r["pool_fingerprint"]]
                     for r in history))
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")
