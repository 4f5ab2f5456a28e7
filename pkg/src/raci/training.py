"""Masked-loss training loop, gradient checking, fine-tuning and MC dropout."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as M
from .core import Dataset, Key
from .model import RaciConfig, Standardizer
from .nn import Params
from .retrieval import NeighborIndex, RetrievalPool, build_neighbor_index
from .rng import stream

log = logging.getLogger(__name__)

masked_mse = M.masked_mse


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class RunState:
    config: RaciConfig
    train_config: TrainConfig
    params: Params
    standardizer: Standardizer
    m: Params
    v: Params
    step: int = 0
    epoch: int = 0
    loss_history: List[dict] = field(default_factory=list)
    pool_fingerprint: str = ""

    @property
    def seed(self) -> int:
        return self.train_config.seed

    def fingerprint(self) -> str:
        return M.fingerprint(self.params, self.standardizer)

    def copy(self) -> "RunState":
        dup = {k: {n: a.copy() for n, a in d.items()} for k, d in
               (("params", self.params), ("m", self.m), ("v", self.v))}
        return replace(self, loss_history=[dict(r) for r in self.loss_history], **dup)


def adam_step(params: Params, grads: Params, m: Params, v: Params, step: int, cfg: TrainConfig) -> None:
    """In-place Adam update; ``step`` is the 1-based step count."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in params:
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        params[name] -= cfg.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)


def clip_grads(grads: Params, max_norm: Optional[float]) -> float:
    total = float(np.sqrt(sum(float((grads[k] * grads[k]).sum()) for k in sorted(grads))))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def new_state(dataset: Dataset, cfg: RaciConfig, tcfg: TrainConfig) -> RunState:
    train = dataset.split_samples("train")
    std = Standardizer.fit(train)
    params = M.init_params(cfg, dataset.dims, tcfg.seed)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return RunState(cfg, tcfg, params, std, zeros, {k: np.zeros_like(v) for k, v in params.items()})


def neighbor_index_for(dataset: Dataset, cfg: RaciConfig) -> Optional[NeighborIndex]:
    if cfg.model != "raci" or not cfg.use_monthly_ctx or len(dataset.sites) < 2 or cfg.k_neighbors < 1:
        return None
    return build_neighbor_index(dataset.sites, cfg.k_neighbors)


def _check_trainable(dataset: Dataset, pool_dataset: Dataset, cfg: RaciConfig) -> List[Key]:
    keys = [k for k in dataset.splits["train"] if dataset.samples[k].mask.any()]
    if not dataset.splits["train"]:
        raise ValueError("train split is empty")
    if not keys:
        raise ValueError("degenerate dataset: no observed targets in the train split")
    if cfg.model == "raci" and cfg.use_yearly_ctx and not pool_dataset.splits["auxiliary"]:
        raise ValueError("auxiliary split is empty; yearly retrieval needs a pool")
    return keys


def train(dataset: Dataset, cfg: RaciConfig, tcfg: TrainConfig, state: Optional[RunState] = None,
          pool_dataset: Optional[Dataset] = None,
          on_retrieval: Optional[Callable[[int, list, RetrievalPool], None]] = None) -> RunState:
    """Train for ``tcfg.epochs`` epochs, continuing ``state`` if given.

    Each epoch rebuilds the retrieval pool from ``pool_dataset`` (default:
    ``dataset``) with the parameters at the start of the epoch, shuffles the
    train keys with an epoch-derived stream and takes one Adam step per batch.
    ``on_retrieval(epoch, reports, pool)`` receives every batch's retrieval reports.
    """
    pool_dataset = dataset if pool_dataset is None else pool_dataset
    keys = _check_trainable(dataset, pool_dataset, cfg)
    if state is None:
        state = new_state(dataset, cfg, tcfg)
    else:
        state = state.copy()
        M.check_dims(state.params, state.config, dataset.dims)
        cfg = state.config
        state.train_config = tcfg
    nindex = neighbor_index_for(dataset, cfg)
    cal = dataset.calendar
    use_pool = cfg.model == "raci" and cfg.use_yearly_ctx
    for _ in range(tcfg.epochs):
        epoch = state.epoch
        pool = None
        if use_pool:
            pool = M.build_pool(pool_dataset, state.params, state.standardizer, cfg)
            state.pool_fingerprint = pool.fingerprint
        order = stream(tcfg.seed, "shuffle", epoch).permutation(len(keys))
        sse: Dict[Key, float] = {}
        n_obs = 0
        n_fallback = 0
        n_targets = 0
        for b, start in enumerate(range(0, len(keys), tcfg.batch_size)):
            batch = sorted(keys[i] for i in order[start:start + tcfg.batch_size])
            ws = M.assemble(batch, dataset, state.standardizer, cfg, nindex)
            drop_rng = stream(tcfg.seed, "dropout", epoch, b) if cfg.dropout_p > 0 else None
            loss, grads, diag, yhat = M.loss_and_grads(state.params, ws, pool, cfg, cal, drop_rng)
            if diag is not None and diag.reports:
                n_fallback += sum(r.fallback for r in diag.reports)
                if on_retrieval is not None:
                    on_retrieval(epoch, diag.reports, pool)
            elif use_pool:
                n_fallback += len(batch)
            n_targets += len(batch)
            resid = np.where(ws.mask, yhat - ws.y, 0.0)
            for key, r in zip(batch, resid):
                sse[key] = float((r * r).sum())
            n_obs += int(ws.mask.sum())
            for name, g in grads.items():
                if not np.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient in {name} at epoch {epoch}")
            clip_grads(grads, tcfg.grad_clip)
            state.step += 1
            adam_step(state.params, grads, state.m, state.v, state.step, tcfg)
        # summed in sorted-key order so the value does not depend on the shuffle
        row = {"epoch": epoch, "loss": sum(sse[k] for k in sorted(sse)) / n_obs,
               "fallback_rate": (n_fallback / n_targets) if use_pool else float("nan"),
               "pool_fingerprint": pool.fingerprint if pool is not None else ""}
        state.loss_history.append(row)
        state.epoch += 1
        log.info("epoch %d loss %.6g fallback %.3f", epoch, row["loss"], row["fallback_rate"])
    return state


def fine_tune(state: RunState, dataset: Dataset, tcfg: TrainConfig,
              pool_dataset: Optional[Dataset] = None, **kwargs) -> RunState:
    """Continue optimizing ``state`` on ``dataset``'s train split.

    The retrieval pool keeps coming from ``pool_dataset`` (the pretraining
    data); the standardizer and optimizer moments carry over.
    """
    M.check_dims(state.params, state.config, dataset.dims)
    return train(dataset, state.config, tcfg, state=state, pool_dataset=pool_dataset, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Tuple[str, int]
    per_param: Dict[str, float]
    n_checked: int
    fallback_targets: int
    n_targets: int


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(params: Params, ws: M.WorkingSet, pool: Optional[RetrievalPool], cfg: RaciConfig,
               calendar, step: float = 1e-5, names: Optional[Sequence[str]] = None) -> GradCheckResult:
    """Compare backprop gradients of the masked MSE with central differences.

    Dropout is off and retrieval candidate sets are frozen at the unperturbed
    point. The loss difference is evaluated as
    ``sum(mask * (yp - ym) * (yp + ym - 2y)) / n`` which equals
    ``L(p + step) - L(p - step)`` without subtracting two nearly equal sums.
    """
    cfg = replace(cfg, dropout_p=0.0)
    _, grads, diag, _ = M.loss_and_grads(params, ws, pool, cfg, calendar)
    frozen = {r.target: r.members for r in diag.reports} if diag is not None and diag.reports else None
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
    mask = ws.mask
    n_obs = mask.sum()

    def predict():
        return M.forward(params, ws, pool, cfg, calendar, frozen_members=frozen)[0]

    per_param: Dict[str, float] = {}
    worst = ("", -1)
    worst_err = 0.0
    count = 0
    for name in (names or list(params)):
        arr = params[name]
        err_max = 0.0
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + step
            yp = predict()
            arr.flat[i] = old - step
            ym = predict()
            arr.flat[i] = old
            diff = np.where(mask, (yp - ym) * (yp + ym - 2.0 * ws.y), 0.0).sum() / n_obs
            numeric = diff / (2.0 * step)
            err = relative_error(float(grads[name].flat[i]), float(numeric))
            count += 1
            if err > err_max:
                err_max = err
            if err > worst_err:
                worst_err, worst = err, (name, i)
        per_param[name] = err_max
    n_fb = sum(r.fallback for r in diag.reports) if diag is not None and diag.reports else ws.n_targets
    return GradCheckResult(worst_err, worst, per_param, count, n_fb, ws.n_targets)


def toy_gradcheck_setup(seed: int = 0, h: int = 4, tau: float = -0.999, k_pca: int = 2):
    """The desk-scale gradient-check instance: 2 sites, 24-day calendar, 2 train years, 1 auxiliary year.

    The default ``tau`` lets both auxiliary entries through so the retrieval
    attention weights are non-trivial and get checked too.
    """
    from .synthetic import GeneratorConfig, build_benchmark

    gen = GeneratorConfig(rows=1, cols=2, first_year=2000, last_year=2002, n_test_years=0,
                          days_per_year=24, month_lengths=(2,) * 12, seed=seed)
    ds = build_benchmark(gen)
    cfg = RaciConfig(h=h, lstm_layers=3, dropout_p=0.0, k_neighbors=1, k_pca=k_pca, tau=tau)
    tcfg = TrainConfig(epochs=0, seed=seed)
    state = new_state(ds, cfg, tcfg)
    pool = M.build_pool(ds, state.params, state.standardizer, cfg)
    ws = M.assemble(ds.splits["train"], ds, state.standardizer, cfg, neighbor_index_for(ds, cfg))
    return ds, cfg, state, pool, ws


# ---------------------------------------------------------------------------
# MC dropout
# ---------------------------------------------------------------------------


@dataclass
class McDropoutResult:
    keys: List[Key]
    mean: np.ndarray
    std: np.ndarray
    spread_ratio: float


def mc_dropout_predict(state: RunState, dataset: Dataset, keys: Sequence[Key], p: float = 0.1,
                       n_passes: int = 50, seed: int = 0, pool_dataset: Optional[Dataset] = None,
                       batch_size: int = 32) -> McDropoutResult:
    """``n_passes`` stochastic forward passes with dropout rate ``p``.

    Returns the per-day mean and sample (ddof=1) standard deviation and the
    ratio ``mean(std) / mean(|mean|)`` averaged over all returned days.
    """
    if n_passes < 2:
        raise ValueError("need at least two passes")
    cfg = state.config
    pool_dataset = dataset if pool_dataset is None else pool_dataset
    pool = None
    if cfg.model == "raci" and cfg.use_yearly_ctx:
        pool = M.build_pool(pool_dataset, state.params, state.standardizer, cfg)
    nindex = neighbor_index_for(dataset, cfg)
    keys = [tuple(k) for k in keys]
    runs = []
    for t in range(n_passes):
        rng = stream(seed, "mc_dropout", t) if p > 0 else None
        yhat, _ = M.predict(state.params, dataset, keys, state.standardizer, cfg, pool, nindex,
                            batch_size, rng=rng, p_drop=p)
        runs.append(yhat)
    runs = np.stack(runs)
    # deviations from the first pass keep identical passes exactly at zero spread
    dev = runs - runs[0]
    mean = runs[0] + dev.mean(axis=0)
    std = dev.std(axis=0, ddof=1)
    denom = np.abs(mean).mean()
    ratio = float(std.mean() / denom) if denom > 0 else float("inf")
    return McDropoutResult(keys, mean, std, ratio)


# ---------------------------------------------------------------------------
# retrieval audit log
# ---------------------------------------------------------------------------

RETRIEVAL_LOG_HEADER = ("epoch", "target_site", "target_year", "member_site", "member_year",
                        "similarity", "weight", "tau", "member_split")


class RetrievalLog:
    """Collects every retrieved candidate seen during training; usable as ``on_retrieval``."""

    def __init__(self, pool_dataset: Dataset):
        self.rows: List[tuple] = []
        self.n_targets = 0
        self.n_fallback = 0
        split_of = {}
        for split, keys in pool_dataset.splits.items():
            for k in keys:
                split_of[k] = split
        self._split_of = split_of

    def __call__(self, epoch: int, reports, pool: RetrievalPool) -> None:
        for rep in reports:
            self.n_targets += 1
            self.n_fallback += int(rep.fallback)
            for idx, wt in zip(rep.members, rep.weights):
                mk = pool.keys[idx]
                self.rows.append((epoch, rep.target[0], int(rep.target[1]), mk[0], int(mk[1]),
                                  float(rep.similarities[idx]), float(wt), float(pool.tau),
                                  self._split_of.get(tuple(mk), "none")))

    def violations(self) -> List[str]:
        out = []
        for r in self.rows:
            epoch, ts, ty, ms, my, sim, _, tau, split = r
            if not sim > tau:
                out.append(f"epoch {epoch}: {(ms, my)} for {(ts, ty)} has similarity {sim!r} <= tau {tau!r}")
            if split != "auxiliary":
                out.append(f"epoch {epoch}: {(ms, my)} for {(ts, ty)} comes from split {split!r}")
            if (ms, my) == (ts, ty):
                out.append(f"epoch {epoch}: target {(ts, ty)} retrieved itself")
            elif my == ty:
                out.append(f"epoch {epoch}: {(ms, my)} shares the target year {ty}")
        return out
