"""Full RACI forward/backward pass, ablation variants and the plain LSTM baseline.

Pipeline for a batch of target site-years::

    encode -> aggregate (day->month, month->year) -> retrieve yearly context
    -> propagate (year->month) -> fuse monthly neighbor context
    -> propagate (month->day) -> stacked LSTM over [daily state ; yearly context]
    -> affine readout per day

Targets are evaluated together with their geographic neighbors for the same
year (the "working set"); neighbor rows only feed the monthly context, and
gradients flow through them as well.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import encoders, hierarchy, retrieval
from .core import BLOCKS, CalendarSpec, Dataset, Key, SiteYearSample, replicate_for_baseline
from .nn import Params, apply_mask, dropout_mask, init_lstm, lstm_head_bwd, lstm_head_fwd, mlp2_bwd
from .retrieval import NeighborIndex, RetrievalPool, StalePoolError
from .rng import stream

VARIANTS = {
    "Full": {},
    "-Temporal": {"use_temporal": False},
    "-Monthly": {"use_monthly_ctx": False},
    "-Yearly": {"use_yearly_ctx": False},
    "-Both": {"use_monthly_ctx": False, "use_yearly_ctx": False},
}


@dataclass(frozen=True)
class RaciConfig:
    h: int = 32
    lstm_layers: int = 3
    dropout_p: float = 0.1
    k_neighbors: int = 8
    k_pca: int = 4
    tau: float = 0.99
    use_temporal: bool = True
    use_monthly_ctx: bool = True
    use_yearly_ctx: bool = True
    model: str = "raci"  # "raci" or "lstm" (replicated-covariate baseline)

    def __post_init__(self):
        if self.h < 1 or self.lstm_layers < 1:
            raise ValueError("h and lstm_layers must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not -1.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (-1, 1]")
        if self.model not in ("raci", "lstm"):
            raise ValueError(f"unknown model kind {self.model!r}")

    def variant(self, name: str) -> "RaciConfig":
        return replace(self, **VARIANTS[name])

    @classmethod
    def from_dict(cls, d: dict) -> "RaciConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# input standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-feature z-scoring fitted on the train split (zero spread maps to 1)."""

    daily_mean: np.ndarray
    daily_std: np.ndarray
    monthly_mean: np.ndarray
    monthly_std: np.ndarray
    regime_mean: np.ndarray
    regime_std: np.ndarray

    @classmethod
    def fit(cls, samples: Sequence[SiteYearSample]) -> "Standardizer":
        if not samples:
            raise ValueError("cannot fit standardizer on an empty split")
        d = np.concatenate([s.x_daily for s in samples])
        m = np.concatenate([s.x_monthly for s in samples])
        r = np.stack([s.x_regime for s in samples])

        def stats(x):
            mu = x.mean(axis=0)
            sd = x.std(axis=0)
            return mu, np.where(sd > 1e-12, sd, 1.0)

        return cls(*stats(d), *stats(m), *stats(r))

    @classmethod
    def identity(cls, dims: Dict[str, int]) -> "Standardizer":
        dr = dims["yearly"] + dims["static"]
        return cls(np.zeros(dims["daily"]), np.ones(dims["daily"]), np.zeros(dims["monthly"]),
                   np.ones(dims["monthly"]), np.zeros(dr), np.ones(dr))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f"std.{k}": getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Standardizer":
        return cls(**{k: np.asarray(arrays[f"std.{k}"], dtype=np.float64) for k in cls.__dataclass_fields__})

    def daily(self, x):
        return (x - self.daily_mean) / self.daily_std

    def monthly(self, x):
        return (x - self.monthly_mean) / self.monthly_std

    def regime(self, x):
        return (x - self.regime_mean) / self.regime_std


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: RaciConfig, dims: Dict[str, int], seed: int) -> Params:
    """Uniform(+-1/sqrt(fan_in)) initialization from the run seed."""
    rng = stream(seed, "init", cfg.model)
    params: Params = {}
    d_regime = dims["yearly"] + dims["static"]
    if cfg.model == "lstm":
        width = sum(dims[b] for b in BLOCKS)
        init_lstm(params, rng, "lstm", width, cfg.h, cfg.lstm_layers)
        return params
    encoders.init_encoders(params, rng, dims["daily"], dims["monthly"], d_regime, cfg.h)
    hierarchy.init_hierarchy(params, rng, cfg.h)
    retrieval.init_retrieval(params, rng, cfg.h)
    init_lstm(params, rng, "lstm", cfg.h + 1, cfg.h, cfg.lstm_layers)
    return params


def fingerprint(params: Params, standardizer: Optional[Standardizer] = None) -> str:
    hsh = hashlib.blake2b(digest_size=12)
    arrays = dict(params)
    if standardizer is not None:
        arrays.update(standardizer.arrays())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        hsh.update(name.encode())
        hsh.update(str(a.shape).encode())
        hsh.update(a.tobytes())
    return hsh.hexdigest()


def check_dims(params: Params, cfg: RaciConfig, dims: Dict[str, int]) -> None:
    """Raise ValueError naming the first feature block whose width disagrees with ``params``."""
    if cfg.model == "lstm":
        want = params["lstm0.Wx"].shape[0]
        got = sum(dims[b] for b in BLOCKS)
        if want != got:
            raise ValueError(f"replicated input width {got} != checkpoint width {want} "
                             f"(blocks daily/monthly/yearly/static = {[dims[b] for b in BLOCKS]})")
        return
    checks = [("daily", "enc_d.W1", dims["daily"]), ("monthly", "enc_m.W1", dims["monthly"]),
              ("yearly+static", "enc_r.W1", dims["yearly"] + dims["static"])]
    for block, name, got in checks:
        if params[name].shape[0] != got:
            raise ValueError(f"{block} block width {got} != checkpoint width {params[name].shape[0]}")


# ---------------------------------------------------------------------------
# working sets
# ---------------------------------------------------------------------------


@dataclass
class WorkingSet:
    keys: List[Key]  # targets first, then neighbor-only rows
    n_targets: int
    xd: np.ndarray
    xm: np.ndarray
    xr: np.ndarray
    y: np.ndarray  # targets only
    mask: np.ndarray
    nb_idx: np.ndarray  # (targets, k) rows into the working set
    nb_valid: np.ndarray
    x_rep: Optional[np.ndarray] = None

    @property
    def target_keys(self) -> List[Key]:
        return self.keys[: self.n_targets]


def assemble(keys: Sequence[Key], dataset: Dataset, standardizer: Standardizer, cfg: RaciConfig,
             nindex: Optional[NeighborIndex] = None) -> WorkingSet:
    targets = [tuple(k) for k in keys]
    rows = list(targets)
    where = {k: i for i, k in enumerate(rows)}
    nb_lists = []
    use_nb = cfg.model == "raci" and nindex is not None
    for site, year in targets:
        lst = []
        if use_nb:
            for other in nindex.neighbors.get(site, ()):
                nk = (other, year)
                if nk not in dataset.samples:
                    continue
                if nk not in where:
                    where[nk] = len(rows)
                    rows.append(nk)
                lst.append(where[nk])
        nb_lists.append(lst)
    k = max([len(x) for x in nb_lists] + [0])
    nb_idx = np.zeros((len(targets), k), dtype=np.intp)
    nb_valid = np.zeros((len(targets), k), dtype=bool)
    for i, lst in enumerate(nb_lists):
        nb_idx[i, :len(lst)] = lst
        nb_valid[i, :len(lst)] = True
    samples = [dataset.samples[r] for r in rows]
    tgt = samples[: len(targets)]
    ws = WorkingSet(
        keys=rows, n_targets=len(targets),
        xd=np.stack([standardizer.daily(s.x_daily) for s in samples]),
        xm=np.stack([standardizer.monthly(s.x_monthly) for s in samples]),
        xr=np.stack([standardizer.regime(s.x_regime) for s in samples]),
        y=np.stack([s.y for s in tgt]), mask=np.stack([s.mask for s in tgt]),
        nb_idx=nb_idx, nb_valid=nb_valid,
    )
    if cfg.model == "lstm":
        ws.x_rep = np.stack([
            replicate_for_baseline(
                SiteYearSample(s.site_id, s.year, standardizer.daily(s.x_daily),
                               standardizer.monthly(s.x_monthly),
                               standardizer.regime(s.x_regime)[: s.x_yearly.shape[0]],
                               standardizer.regime(s.x_regime)[s.x_yearly.shape[0]:], s.y, s.mask),
                dataset.calendar)
            for s in tgt])
    return ws


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Diagnostics:
    """Per-target intermediate states and attention/gate records."""

    keys: List[Key]
    h_daily: np.ndarray
    h_monthly: np.ndarray
    h_yearly: np.ndarray
    h_monthly_tilde: np.ndarray
    h_monthly_eff: np.ndarray
    h_daily_tilde: np.ndarray
    alpha_d2m: np.ndarray
    alpha_m2y: np.ndarray
    beta_y2m: np.ndarray
    beta_m2d: np.ndarray
    monthly_ctx: np.ndarray
    monthly_ctx_weights: Optional[np.ndarray]
    yearly_ctx: np.ndarray
    reports: List[retrieval.RetrievalReport] = field(default_factory=list)


def _check_pool(pool: RetrievalPool, params: Params, standardizer: Optional[Standardizer]):
    if len(pool) and pool.fingerprint != fingerprint(params, standardizer):
        raise StalePoolError("retrieval pool was built from different parameters; rebuild it")


def raci_forward(params: Params, ws: WorkingSet, pool: RetrievalPool, cfg: RaciConfig,
                 calendar: CalendarSpec, rng: Optional[np.random.Generator] = None,
                 p_drop: Optional[float] = None, frozen_members=None):
    """Predictions (targets, days), diagnostics, backward cache.

    Dropout is active only when ``rng`` is given.
    """
    p = cfg.dropout_p if p_drop is None else p_drop
    temporal = cfg.use_temporal
    nt = ws.n_targets
    days = calendar.days_per_year

    enc = {}
    outs = {}
    for name, prefix, x in (("d", "enc_d", ws.xd), ("m", "enc_m", ws.xm), ("r", "enc_r", ws.xr)):
        raw, c = encoders.embed(x, params, prefix)
        mask = dropout_mask(rng, p, raw.shape)
        enc[name] = (c, mask)
        outs[name] = apply_mask(raw, mask)
    e_d, e_m, e_r = outs["d"], outs["m"], outs["r"]

    hm, a_dm, c_dm = hierarchy.agg_daily_monthly_fwd(e_d, e_m, calendar, params, temporal)
    hy, a_my, c_my = hierarchy.agg_monthly_yearly_fwd(hm, e_r, params, temporal)

    c_ret = None
    reports: List[retrieval.RetrievalReport] = []
    if cfg.use_yearly_ctx and len(pool):
        cy, reports, c_ret = retrieval.yearly_ctx_fwd(hy[:nt], ws.target_keys, pool, params,
                                                      frozen_members)
    else:
        cy = np.zeros((nt, days))

    hmt, b_ym, c_ym = hierarchy.prop_yearly_monthly_fwd(hy, hm, params, temporal)

    c_ctx = c_fuse = None
    ctx_w = None
    if cfg.use_monthly_ctx and ws.nb_valid.any():
        ctx, ctx_w, c_ctx = retrieval.monthly_ctx_fwd(hmt[:nt], hmt, ws.nb_idx, ws.nb_valid, params)
        hme, _, c_fuse = retrieval.fuse_monthly_ctx_fwd(ctx, hmt[:nt], params)
    else:
        ctx = np.zeros_like(hmt[:nt])
        hme = hmt[:nt]

    hdt, b_md, c_md = hierarchy.prop_monthly_daily_fwd(hme, e_d[:nt], calendar, params, temporal)
    x0 = np.concatenate([hdt, cy[..., None]], axis=-1)
    yhat, c_lstm = lstm_head_fwd(x0, params, "lstm", cfg.lstm_layers, p, rng)

    diag = Diagnostics(ws.target_keys, e_d[:nt], hm[:nt], hy[:nt], hmt[:nt], hme, hdt,
                       a_dm[:nt], a_my[:nt], b_ym[:nt], b_md, ctx, ctx_w, cy, reports)
    cache = dict(enc=enc, c_dm=c_dm, c_my=c_my, c_ret=c_ret, c_ym=c_ym, c_ctx=c_ctx,
                 c_fuse=c_fuse, c_md=c_md, c_lstm=c_lstm, shapes=(e_d.shape, e_m.shape, e_r.shape),
                 hmt_shape=hmt.shape)
    return yhat, diag, cache


def raci_backward(d_yhat, cache, params: Params, pool: RetrievalPool, cfg: RaciConfig,
                  calendar: CalendarSpec) -> Params:
    grads: Params = {}
    h = cfg.h
    nt = d_yhat.shape[0]
    d_x0 = lstm_head_bwd(d_yhat, cache["c_lstm"], params, grads, "lstm", cfg.lstm_layers)
    d_hdt, d_cy = d_x0[..., :h], d_x0[..., h]

    d_hme, d_ed_t = hierarchy.prop_monthly_daily_bwd(d_hdt, cache["c_md"], calendar, params, grads)
    shape_d, shape_m, shape_r = cache["shapes"]
    d_ed = np.zeros(shape_d)
    d_ed[:nt] += d_ed_t

    d_hmt = np.zeros(cache["hmt_shape"])
    if cache["c_ctx"] is not None:
        d_ctx, d_hmt_t = retrieval.fuse_monthly_ctx_bwd(d_hme, cache["c_fuse"], params, grads)
        d_q, d_all = retrieval.monthly_ctx_bwd(d_ctx, cache["c_ctx"], d_hmt.shape[0], params, grads)
        d_hmt[:nt] += d_hmt_t + d_q
        d_hmt += d_all
    else:
        d_hmt[:nt] += d_hme

    d_hy, d_hm = hierarchy.prop_yearly_monthly_bwd(d_hmt, cache["c_ym"], params, grads)
    if cache["c_ret"] is not None:
        d_hy[:nt] += retrieval.yearly_ctx_bwd(d_cy, cache["c_ret"], pool, params, grads)

    d_hm2, d_er = hierarchy.agg_monthly_yearly_bwd(d_hy, cache["c_my"], params, grads)
    d_hm = d_hm + d_hm2
    d_ed2, d_em = hierarchy.agg_daily_monthly_bwd(d_hm, cache["c_dm"], calendar, params, grads)
    d_ed += d_ed2

    for name, prefix, d in (("d", "enc_d", d_ed), ("m", "enc_m", d_em), ("r", "enc_r", d_er)):
        c, mask = cache["enc"][name]
        mlp2_bwd(apply_mask(d, mask), c, params, grads, prefix)
    for name, value in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return grads


def baseline_forward(params: Params, ws: WorkingSet, cfg: RaciConfig,
                     rng: Optional[np.random.Generator] = None, p_drop: Optional[float] = None):
    p = cfg.dropout_p if p_drop is None else p_drop
    return lstm_head_fwd(ws.x_rep, params, "lstm", cfg.lstm_layers, p, rng)


def baseline_backward(d_yhat, cache, params: Params, cfg: RaciConfig) -> Params:
    grads: Params = {}
    lstm_head_bwd(d_yhat, cache, params, grads, "lstm", cfg.lstm_layers)
    return grads


def masked_mse(yhat, y, mask) -> float:
    """Mean squared error over observed positions, pooled across the batch."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("degenerate batch: no observed positions")
    diff = np.where(mask, np.asarray(yhat) - np.asarray(y), 0.0)
    return float((diff * diff).sum() / n)


def masked_mse_grad(yhat, y, mask):
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 2.0 * (yhat - y), 0.0) / mask.sum()


def forward(params: Params, ws: WorkingSet, pool: Optional[RetrievalPool], cfg: RaciConfig,
            calendar: CalendarSpec, rng=None, p_drop=None, frozen_members=None):
    """Dispatch on model kind; returns ``(yhat, diagnostics or None, cache)``."""
    if cfg.model == "lstm":
        yhat, cache = baseline_forward(params, ws, cfg, rng, p_drop)
        return yhat, None, cache
    if pool is None:
        pool = retrieval.empty_pool(calendar.days_per_year, cfg.h)
    return raci_forward(params, ws, pool, cfg, calendar, rng, p_drop, frozen_members)


def loss_and_grads(params: Params, ws: WorkingSet, pool: Optional[RetrievalPool], cfg: RaciConfig,
                   calendar: CalendarSpec, rng=None, frozen_members=None):
    """Returns ``(loss, grads, diagnostics, yhat)``."""
    yhat, diag, cache = forward(params, ws, pool, cfg, calendar, rng, frozen_members=frozen_members)
    loss = masked_mse(yhat, ws.y, ws.mask)
    d_yhat = masked_mse_grad(yhat, ws.y, ws.mask)
    if cfg.model == "lstm":
        grads = baseline_backward(d_yhat, cache, params, cfg)
    else:
        if pool is None:
            pool = retrieval.empty_pool(calendar.days_per_year, cfg.h)
        grads = raci_backward(d_yhat, cache, params, pool, cfg, calendar)
    return loss, grads, diag, yhat


# ---------------------------------------------------------------------------
# pool construction and batched prediction
# ---------------------------------------------------------------------------


def yearly_embeddings(params: Params, samples: Sequence[SiteYearSample], standardizer: Standardizer,
                      cfg: RaciConfig, calendar: CalendarSpec) -> np.ndarray:
    """Eval-mode yearly embeddings (n, h) for standalone samples (no spatial context needed)."""
    xd = np.stack([standardizer.daily(s.x_daily) for s in samples])
    xm = np.stack([standardizer.monthly(s.x_monthly) for s in samples])
    xr = np.stack([standardizer.regime(s.x_regime) for s in samples])
    e_d = encoders.embed(xd, params, "enc_d")[0]
    e_m = encoders.embed(xm, params, "enc_m")[0]
    e_r = encoders.embed(xr, params, "enc_r")[0]
    hm = hierarchy.agg_daily_monthly_fwd(e_d, e_m, calendar, params, cfg.use_temporal)[0]
    return hierarchy.agg_monthly_yearly_fwd(hm, e_r, params, cfg.use_temporal)[0]


def build_pool(pool_dataset: Dataset, params: Params, standardizer: Standardizer, cfg: RaciConfig,
               split: str = "auxiliary") -> RetrievalPool:
    """Encode every auxiliary sample with the current parameters and fit the PCA filter."""
    samples = pool_dataset.split_samples(split)
    if not samples:
        raise retrieval.PoolConfigError(f"{split} split is empty")
    emb = yearly_embeddings(params, samples, standardizer, cfg, pool_dataset.calendar)
    return retrieval.assemble_pool(
        [s.key for s in samples], emb, [s.y for s in samples], [s.mask for s in samples],
        cfg.k_pca, cfg.tau, fingerprint(params, standardizer), source=split)


def predict(params: Params, dataset: Dataset, keys: Sequence[Key], standardizer: Standardizer,
            cfg: RaciConfig, pool: Optional[RetrievalPool] = None,
            nindex: Optional[NeighborIndex] = None, batch_size: int = 32, rng=None,
            p_drop: Optional[float] = None, check_pool: bool = True):
    """Predictions for ``keys`` (in the given order) plus concatenated diagnostics."""
    if cfg.model == "raci" and pool is not None and check_pool:
        _check_pool(pool, params, standardizer)
    preds, diags = [], []
    keys = [tuple(k) for k in keys]
    for start in range(0, len(keys), batch_size):
        ws = assemble(keys[start:start + batch_size], dataset, standardizer, cfg, nindex)
        yhat, diag, _ = forward(params, ws, pool, cfg, dataset.calendar, rng, p_drop)
        preds.append(yhat)
        if diag is not None:
            diags.append(diag)
    return (np.concatenate(preds) if preds else np.zeros((0, dataset.calendar.days_per_year))), diags


def predict_sample(sample: SiteYearSample, dataset: Dataset, pool: Optional[RetrievalPool],
                   nindex: Optional[NeighborIndex], params: Params, standardizer: Standardizer,
                   cfg: RaciConfig, mode: str = "eval", rng=None):
    """Single-sample forward; ``mode="train"`` enables dropout with ``rng``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" and cfg.model == "raci" and pool is not None:
        _check_pool(pool, params, standardizer)
    ws = assemble([sample.key], dataset, standardizer, cfg, nindex)
    yhat, diag, _ = forward(params, ws, pool, cfg, dataset.calendar, rng if mode == "train" else None)
    return yhat[0], diag
