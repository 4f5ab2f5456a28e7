"""Metrics, grouped reports, ablation and sensitivity tables, attention exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .core import Dataset, Key
from .model import RaciConfig, VARIANTS
from .training import RunState, TrainConfig, neighbor_index_for, train

ABLATION_COLUMNS = ("Full", "-Temporal", "-Monthly", "-Yearly", "-Both")


class UndefinedMetricError(ValueError):
    pass


def rmse(pred, obs, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    mask = np.ones(obs.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise UndefinedMetricError("rmse needs at least one observed position")
    err = np.where(mask, pred - obs, 0.0)
    return float(np.sqrt((err * err).sum() / n))


def _r2_sums(groups, preds, obs, masks) -> Tuple[float, float, int, int]:
    """Pooled ``(sum sq. error, sum sq. deviation, n used, n skipped)`` per site grouping."""
    num = 0.0
    den = 0.0
    used = skipped = 0
    for g in np.unique(groups):
        sel = groups == g
        m = masks[sel]
        if not m.any():
            skipped += 1
            continue
        y = obs[sel][m]
        yh = preds[sel][m]
        dev = y - y.mean()
        d = float((dev * dev).sum())
        if d == 0.0:
            skipped += 1
            continue
        e = y - yh
        num += float((e * e).sum())
        den += d
        used += 1
    return num, den, used, skipped


def within_site_r2(site_ids, preds, obs, masks=None, return_skipped: bool = False):
    """Coefficient of determination with per-site baseline means.

    Parameters
    ----------
    site_ids : sequence
        Site label per row; rows sharing a label form one site.
    preds, obs : array_like
        (rows, steps) or (rows,) arrays.
    masks : array_like, optional
        Observed positions; defaults to all.
    return_skipped : bool
        Also return the number of sites excluded for zero variance.

    Sites whose masked observations have zero variance (or no observations)
    are dropped from both sums.
    """
    obs = np.asarray(obs, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[:, None]
        preds = preds[:, None]
    masks = np.ones(obs.shape, dtype=bool) if masks is None else np.asarray(masks, dtype=bool).reshape(obs.shape)
    groups = np.asarray([str(s) for s in site_ids])
    num, den, used, skipped = _r2_sums(groups, preds, obs, masks)
    if used == 0:
        raise UndefinedMetricError("every site has zero within-site variance; R² is undefined")
    r2 = 1.0 - num / den
    return (r2, skipped) if return_skipped else r2


@dataclass
class GroupMetrics:
    rmse: float
    r2: float
    n_sites: int
    n_skipped: int
    sse: float
    n_obs: int


@dataclass
class MetricsReport:
    rmse: float
    r2: float
    n_sites: int
    n_skipped: int
    fallback_rate: float
    groups: Dict[str, GroupMetrics] = field(default_factory=dict)
    provenance: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse, "r2": self.r2, "n_sites": self.n_sites, "n_skipped": self.n_skipped,
            "fallback_rate": self.fallback_rate,
            "groups": {k: vars(v) for k, v in self.groups.items()},
            "provenance": self.provenance,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "rmse", "r2", "n_sites", "n_skipped"])
        w.writerow(["all", repr(self.rmse), repr(self.r2), self.n_sites, self.n_skipped])
        for k in sorted(self.groups):
            g = self.groups[k]
            w.writerow([k, repr(g.rmse), repr(g.r2), g.n_sites, g.n_skipped])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"split: {self.provenance.get('split', '?')}",
                 f"checkpoint: {self.provenance.get('checkpoint', '?')}",
                 f"RMSE: {self.rmse:.6g}",
                 f"within-site R2: {self.r2:.6g}",
                 f"sites: {self.n_sites} (skipped for zero variance: {self.n_skipped})",
                 f"retrieval fallback rate: {self.fallback_rate:.4g}"]
        for k in sorted(self.groups):
            g = self.groups[k]
            lines.append(f"  [{k}] RMSE {g.rmse:.6g}  R2 {g.r2:.6g}  sites {g.n_sites}")
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str = "metrics") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.txt").write_text(self.summary())


@dataclass
class Predictions:
    keys: List[Key]
    yhat: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    diagnostics: list
    fallback: Optional[np.ndarray]


def pool_for(state: RunState, pool_dataset: Dataset):
    cfg = state.config
    if cfg.model != "raci" or not cfg.use_yearly_ctx:
        return None
    return M.build_pool(pool_dataset, state.params, state.standardizer, cfg)


def collect_predictions(state: RunState, dataset: Dataset, split: str = "test",
                        pool_dataset: Optional[Dataset] = None, pool=None,
                        batch_size: int = 32) -> Predictions:
    keys = list(dataset.splits[split])
    if not keys:
        raise ValueError(f"{split} split is empty")
    if pool is None:
        pool = pool_for(state, dataset if pool_dataset is None else pool_dataset)
    nindex = neighbor_index_for(dataset, state.config)
    yhat, diags = M.predict(state.params, dataset, keys, state.standardizer, state.config, pool,
                            nindex, batch_size)
    y = np.stack([dataset.samples[k].y for k in keys])
    mask = np.stack([dataset.samples[k].mask for k in keys])
    fallback = None
    reports = [r for d in diags for r in d.reports]
    if reports:
        fallback = np.array([r.fallback for r in reports])
    elif pool is not None or (state.config.model == "raci" and state.config.use_yearly_ctx):
        fallback = np.ones(len(keys), dtype=bool)
    return Predictions(keys, yhat, y, mask, diags, fallback)


def metrics_from_predictions(pred: Predictions, dataset: Dataset, group_by: Optional[str] = "region_tag",
                             provenance: Optional[dict] = None) -> MetricsReport:
    sites = np.array([k[0] for k in pred.keys])
    r2, skipped = within_site_r2(sites, pred.yhat, pred.y, pred.mask, return_skipped=True)
    groups: Dict[str, GroupMetrics] = {}
    if group_by:
        labels = np.array([_group_label(dataset, s, group_by) for s in sites])
        for g in sorted(set(labels)):
            sel = labels == g
            num, den, used, sk = _r2_sums(sites[sel], pred.yhat[sel], pred.y[sel], pred.mask[sel])
            m = pred.mask[sel]
            err = np.where(m, pred.yhat[sel] - pred.y[sel], 0.0)
            sse = float((err * err).sum())
            n = int(m.sum())
            groups[g] = GroupMetrics(
                rmse=float(np.sqrt(sse / n)) if n else float("nan"),
                r2=(1.0 - num / den) if used else float("nan"),
                n_sites=int(len(set(sites[sel]))), n_skipped=sk, sse=sse, n_obs=n)
    fb = float(pred.fallback.mean()) if pred.fallback is not None else float("nan")
    return MetricsReport(rmse(pred.yhat, pred.y, pred.mask), float(r2), int(len(set(sites))), skipped,
                         fb, groups, dict(provenance or {}))


def _group_label(dataset: Dataset, site_id: str, group_by: str) -> str:
    meta = dataset.sites[site_id]
    if group_by == "region_tag":
        return meta.region_tag if meta.region_tag is not None else "untagged"
    if group_by == "site":
        return site_id
    raise ValueError(f"unknown grouping {group_by!r}")


def evaluate(state: RunState, dataset: Dataset, split: str = "test", group_by: Optional[str] = "region_tag",
             pool_dataset: Optional[Dataset] = None, batch_size: int = 32,
             checkpoint_id: Optional[str] = None) -> MetricsReport:
    """Eval-mode metrics of ``state`` on ``split``, overall and per group.

    The retrieval pool is built once from the state's parameters over the
    auxiliary split of ``pool_dataset`` (default: ``dataset``). Group R² uses
    per-site means and pools sums within each group only.
    """
    pred = collect_predictions(state, dataset, split, pool_dataset, batch_size=batch_size)
    prov = {"checkpoint": checkpoint_id or state.fingerprint(), "split": split,
            "config": state.config.to_dict()}
    return metrics_from_predictions(pred, dataset, group_by, prov)


# ---------------------------------------------------------------------------
# ablation and sensitivity
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    seed: int
    reports: Dict[str, MetricsReport]
    states: Dict[str, RunState]

    def table(self) -> Dict[str, Dict[str, float]]:
        return {"rmse": {v: self.reports[v].rmse for v in self.reports},
                "r2": {v: self.reports[v].r2 for v in self.reports}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = [c for c in ABLATION_COLUMNS if c in self.reports]
        w.writerow(["metric", *cols])
        for metric, row in self.table().items():
            w.writerow([metric, *(repr(row[c]) for c in cols)])
        return buf.getvalue()


def ablation_suite(dataset: Dataset, base: RaciConfig, tcfg: TrainConfig,
                   variants: Sequence[str] = ABLATION_COLUMNS, keep_states: bool = False) -> AblationResult:
    """Train every variant from the same seed and TrainConfig and evaluate on test."""
    if not dataset.splits["auxiliary"]:
        raise ValueError("ablation needs an auxiliary split")
    reports, states = {}, {}
    for name in variants:
        cfg = base.variant(name)
        state = train(dataset, cfg, tcfg)
        reports[name] = evaluate(state, dataset, "test")
        if keep_states:
            states[name] = state
    return AblationResult(tcfg.seed, reports, states)


@dataclass
class SweepRow:
    knob: str
    value: float
    tau: float
    k_pca: int
    rmse: float
    r2: float


@dataclass
class SweepResult:
    rows: List[SweepRow]
    seed: int
    default: Tuple[float, int]
    seed_spread: Optional[Dict[str, float]] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["knob", "value", "tau", "k_pca", "rmse", "r2"])
        for r in self.rows:
            w.writerow([r.knob, repr(r.value), repr(r.tau), r.k_pca, repr(r.rmse), repr(r.r2)])
        return buf.getvalue()

    def sub_table(self, knob: str) -> List[SweepRow]:
        return [r for r in self.rows if r.knob == knob]

    def rmse_range(self) -> float:
        vals = [r.rmse for r in self.rows]
        return max(vals) - min(vals)


def sensitivity_sweep(dataset: Dataset, base: RaciConfig, tcfg: TrainConfig,
                      taus: Sequence[float] = (0.95, 0.97, 0.99), k_pcas: Sequence[int] = (3, 4, 5),
                      spread_seeds: Sequence[int] = ()) -> SweepResult:
    """One-knob-at-a-time sweep around ``(base.tau, base.k_pca)``.

    Each distinct ``(tau, k_pca)`` cell is trained once, so the default cell is
    shared by both sub-tables. ``spread_seeds`` additionally trains the default
    configuration under those seeds and reports the RMSE standard deviation.
    """
    cache: Dict[Tuple[float, int], MetricsReport] = {}

    def cell(tau: float, k: int) -> MetricsReport:
        key = (float(tau), int(k))
        if key not in cache:
            cfg = replace(base, tau=float(tau), k_pca=int(k))
            cache[key] = evaluate(train(dataset, cfg, tcfg), dataset, "test")
        return cache[key]

    rows = []
    for tau in taus:
        r = cell(tau, base.k_pca)
        rows.append(SweepRow("tau", float(tau), float(tau), base.k_pca, r.rmse, r.r2))
    for k in k_pcas:
        r = cell(base.tau, k)
        rows.append(SweepRow("k_pca", float(k), base.tau, int(k), r.rmse, r.r2))
    spread = None
    if spread_seeds:
        vals = []
        for s in spread_seeds:
            if s == tcfg.seed:
                vals.append(cell(base.tau, base.k_pca).rmse)
            else:
                st = train(dataset, base, replace(tcfg, seed=int(s)))
                vals.append(evaluate(st, dataset, "test").rmse)
        spread = {"seed_rmse_std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                  "seed_rmse_range": float(max(vals) - min(vals)),
                  "sweep_rmse_range": float(max(r.rmse for r in rows) - min(r.rmse for r in rows))}
    return SweepResult(rows, tcfg.seed, (base.tau, base.k_pca), spread)


# ---------------------------------------------------------------------------
# attention / retrieval export
# ---------------------------------------------------------------------------


def pearson(a, b) -> Tuple[float, bool]:
    """Pearson r; a constant input yields ``(0.0, True)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0)), False


@dataclass
class AttentionExport:
    key: Key
    alpha_d2m: np.ndarray
    beta_m2d: np.ndarray
    alpha_m2y: np.ndarray
    beta_y2m: np.ndarray
    retrieval: List[Tuple[str, int, float, float]]  # site, year, similarity, weight
    fallback: bool
    correlations: Dict[str, Tuple[float, bool]]

    def daily_csv(self, month_of_day: np.ndarray) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["day", "month", "alpha_d2m", "beta_m2d"])
        for d in range(self.alpha_d2m.shape[0]):
            w.writerow([d, int(month_of_day[d]), repr(float(self.alpha_d2m[d])), repr(float(self.beta_m2d[d]))])
        return buf.getvalue()

    def monthly_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["month", "alpha_m2y", "beta_y2m"])
        for m in range(self.alpha_m2y.shape[0]):
            w.writerow([m, repr(float(self.alpha_m2y[m])), repr(float(self.beta_y2m[m]))])
        return buf.getvalue()

    def retrieval_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site_id", "year", "similarity", "weight"])
        for site, year, sim, wt in self.retrieval:
            w.writerow([site, year, repr(sim), repr(wt)])
        return buf.getvalue()

    def correlations_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["driver", "pearson_r", "constant_flag"])
        for name, (r, flag) in self.correlations.items():
            w.writerow([name, repr(r), int(flag)])
        return buf.getvalue()

    def write(self, directory, calendar) -> List[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{self.key[0]}_{self.key[1]}"
        out = []
        for suffix, text in (("daily", self.daily_csv(calendar.day_to_month)),
                             ("monthly", self.monthly_csv()), ("retrieval", self.retrieval_csv()),
                             ("correlations", self.correlations_csv())):
            p = d / f"attention_{stem}_{suffix}.csv"
            p.write_text(text)
            out.append(p)
        return out


def attention_correlations(alpha_d2m, x_daily, names) -> Dict[str, Tuple[float, bool]]:
    return {n: pearson(alpha_d2m, x_daily[:, j]) for j, n in enumerate(names)}


def export_attention(state: RunState, dataset: Dataset, key: Key, pool_dataset: Optional[Dataset] = None,
                     pool=None) -> AttentionExport:
    """Eval-mode attention, gate and retrieval records for one site-year."""
    key = (str(key[0]), int(key[1]))
    if key not in dataset.samples:
        raise KeyError(f"no sample for {key}")
    if pool is None:
        pool = pool_for(state, dataset if pool_dataset is None else pool_dataset)
    sample = dataset.samples[key]
    _, diag = M.predict_sample(sample, dataset, pool, neighbor_index_for(dataset, state.config),
                               state.params, state.standardizer, state.config, mode="eval")
    if diag is None:
        raise ValueError("attention export needs a RACI checkpoint")
    retrieval = []
    fallback = True
    if diag.reports:
        rep = diag.reports[0]
        fallback = rep.fallback
        for idx, wt in zip(rep.members, rep.weights):
            site, year = pool.keys[idx]
            retrieval.append((site, int(year), float(rep.similarities[idx]), float(wt)))
    names = dataset.feature_names["daily"]
    corr = attention_correlations(diag.alpha_d2m[0], sample.x_daily, names)
    return AttentionExport(key, diag.alpha_d2m[0], diag.beta_m2d[0], diag.alpha_m2y[0], diag.beta_y2m[0],
                           retrieval, fallback, corr)
