"""Role-aware spatial retrieval.

Monthly context: attention over the refined monthly embeddings of the k
geographically nearest sites (same year, same month).

Yearly context: global retrieval from a frozen auxiliary pool. Candidates are
filtered by cosine similarity in a PCA subspace of the yearly embeddings, then
attended over with the full embeddings; the context is the weighted sum of the
candidates' magnitude-normalized flux trajectories, or zeros when no candidate
passes the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .core import Key, SiteMeta
from .hierarchy import gated_add_bwd, gated_add_fwd, init_attention, init_gate
from .nn import Params, add_grad, masked_softmax, softmax, softmax_bwd

NORMALIZE_EPS = 1e-6


class StalePoolError(RuntimeError):
    """The retrieval pool was built from different parameters than the ones in use."""


class PoolConfigError(ValueError):
    pass


CTX_GATE_BIAS = -3.0  # softplus(-3) is about 0.05


def init_retrieval(params: Params, rng, h: int) -> None:
    init_attention(params, rng, "ctx_m", h)
    init_gate(params, rng, "gate_ctx", h)
    # neighbor context starts nearly shut; training opens the gate where it helps
    params["gate_ctx.b2"][:] = CTX_GATE_BIAS
    init_attention(params, rng, "ret_y", h)


# ---------------------------------------------------------------------------
# geographic neighbors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborIndex:
    neighbors: Dict[str, Tuple[str, ...]]
    k: int
    distances: Dict[str, Tuple[float, ...]] = field(default_factory=dict)


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    d = kernels.haversine_matrix_numpy(np.array([lat1, lat2], float), np.array([lon1, lon2], float))
    return float(d[0, 1])


def build_neighbor_index(sites: Mapping[str, SiteMeta] | Sequence[SiteMeta], k: int = 8) -> NeighborIndex:
    """k nearest sites by great-circle distance, self excluded, ties by site_id."""
    metas = sorted(sites.values() if isinstance(sites, Mapping) else sites, key=lambda s: s.site_id)
    if len(metas) < 2:
        raise ValueError("neighbor index needs at least two sites")
    if k < 0:
        raise ValueError("k must be non-negative")
    lat = np.array([s.lat for s in metas], dtype=np.float64)
    lon = np.array([s.lon for s in metas], dtype=np.float64)
    dist = kernels.haversine_matrix(lat, lon)
    rank = np.arange(len(metas))
    out, dists = {}, {}
    for i, meta in enumerate(metas):
        order = np.lexsort((rank, dist[i]))
        order = [j for j in order if j != i][:k]
        out[meta.site_id] = tuple(metas[j].site_id for j in order)
        dists[meta.site_id] = tuple(float(dist[i, j]) for j in order)
    return NeighborIndex(out, k, dists)


def monthly_context(target: np.ndarray, neighbors: np.ndarray, wq: np.ndarray, wk: np.ndarray):
    """Context for one (site, year, month): attention over neighbor embeddings (n, h).

    Returns ``(context, weights)``; zero context and empty weights when n == 0.
    """
    neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, target.shape[-1])
    if neighbors.shape[0] == 0:
        return np.zeros_like(target), np.zeros(0)
    scores = (neighbors @ wk) @ (target @ wq) / np.sqrt(target.shape[-1])
    w = softmax(scores)
    return w @ neighbors, w


def monthly_ctx_fwd(hm_targets, hm_all, nb_idx, nb_valid, params: Params):
    """Batched monthly context.

    hm_targets (t, 12, h) queries; hm_all (n, 12, h) the working set;
    nb_idx (t, k) rows into hm_all, nb_valid (t, k) marks real neighbors.
    """
    h = hm_targets.shape[-1]
    scale = np.sqrt(h)
    keys_raw = hm_all[nb_idx]  # (t, k, 12, h)
    q = hm_targets @ params["ctx_m.Wq"]
    keys = keys_raw @ params["ctx_m.Wk"]
    scores = np.einsum("tmh,tkmh->tmk", q, keys) / scale
    valid = np.broadcast_to(nb_valid[:, None, :], scores.shape)
    w = masked_softmax(scores, valid)
    ctx = np.einsum("tmk,tkmh->tmh", w, keys_raw)
    return ctx, w, (hm_targets, keys_raw, q, keys, w, nb_idx)


def monthly_ctx_bwd(d_ctx, cache, n_all: int, params: Params, grads: Params):
    hm_targets, keys_raw, q, keys, w, nb_idx = cache
    h = hm_targets.shape[-1]
    scale = np.sqrt(h)
    d_keys_raw = np.einsum("tmk,tmh->tkmh", w, d_ctx)
    d_w = np.einsum("tmh,tkmh->tmk", d_ctx, keys_raw)
    d_s = softmax_bwd(d_w, w) / scale
    d_q = np.einsum("tmk,tkmh->tmh", d_s, keys)
    d_keys = np.einsum("tmk,tmh->tkmh", d_s, q)
    add_grad(grads, "ctx_m.Wq", hm_targets.reshape(-1, h).T @ d_q.reshape(-1, h))
    add_grad(grads, "ctx_m.Wk", keys_raw.reshape(-1, h).T @ d_keys.reshape(-1, h))
    d_keys_raw = d_keys_raw + d_keys @ params["ctx_m.Wk"].T
    d_targets = d_q @ params["ctx_m.Wq"].T
    d_all = np.zeros((n_all,) + hm_targets.shape[1:])
    np.add.at(d_all, nb_idx, d_keys_raw)
    return d_targets, d_all


def fuse_monthly_ctx_fwd(ctx, hm_tilde, params: Params):
    """``hm_tilde + g * ctx`` with a softplus gate of the same family as propagation."""
    return gated_add_fwd(ctx, hm_tilde, params, "gate_ctx")


def fuse_monthly_ctx_bwd(d_out, cache, params: Params, grads: Params):
    return gated_add_bwd(d_out, cache, params, grads, "gate_ctx")


# ---------------------------------------------------------------------------
# yearly functional retrieval
# ---------------------------------------------------------------------------


def normalize_trajectory(y: np.ndarray, mask: np.ndarray, eps: float = NORMALIZE_EPS) -> Optional[np.ndarray]:
    """``y / (mean |y| over observed days + eps)`` with masked days zeroed.

    Returns None for a fully masked trajectory (such entries stay out of the pool).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    y = np.asarray(y, dtype=np.float64)
    scale = np.abs(y[mask]).mean() + eps
    return np.where(mask, y / scale, 0.0)


def fit_pca(x: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Centering vector and top-``k`` principal directions (h, k), orthonormal columns."""
    n, h = x.shape
    if k < 1 or k > min(h, n):
        raise PoolConfigError(f"k_pca={k} must be in [1, min(h={h}, n_entries={n})]")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=True)
    comps = vt[:k].T.copy()
    # deterministic sign: largest-magnitude loading positive
    idx = np.abs(comps).argmax(axis=0)
    signs = np.sign(comps[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return mean, comps * signs


@dataclass(frozen=True, eq=False)
class RetrievalPool:
    keys: Tuple[Key, ...]
    embeddings: np.ndarray  # (n, h)
    trajectories: np.ndarray  # (n, days)
    pca_mean: np.ndarray
    pca_components: np.ndarray  # (h, k)
    tau: float
    fingerprint: str
    source: str = "auxiliary"
    excluded: Tuple[Key, ...] = ()

    def __post_init__(self):
        if not -1.0 < self.tau <= 1.0:
            raise PoolConfigError(f"tau={self.tau} outside (-1, 1]")
        proj = (self.embeddings - self.pca_mean) @ self.pca_components
        object.__setattr__(self, "projected", proj)
        object.__setattr__(self, "proj_norms", np.linalg.norm(proj, axis=1))

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def k_pca(self) -> int:
        return self.pca_components.shape[1]

    @property
    def days(self) -> int:
        return self.trajectories.shape[1]

    def with_tau(self, tau: float) -> "RetrievalPool":
        return RetrievalPool(self.keys, self.embeddings, self.trajectories, self.pca_mean,
                             self.pca_components, tau, self.fingerprint, self.source, self.excluded)

    def same_as(self, other: "RetrievalPool") -> bool:
        return (self.keys == other.keys and self.fingerprint == other.fingerprint
                and self.tau == other.tau
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("embeddings", "trajectories", "pca_mean", "pca_components")))


def empty_pool(days: int, h: int, fingerprint: str = "", tau: float = 0.99) -> RetrievalPool:
    return RetrievalPool((), np.zeros((0, h)), np.zeros((0, days)), np.zeros(h), np.zeros((h, 0)),
                         tau, fingerprint, source="empty")


def assemble_pool(keys: Sequence[Key], embeddings: np.ndarray, ys: Sequence[np.ndarray],
                  masks: Sequence[np.ndarray], k_pca: int, tau: float, fingerprint: str,
                  source: str = "auxiliary") -> RetrievalPool:
    """Pool from precomputed yearly embeddings, sorted by (site_id, year)."""
    if len(keys) == 0:
        raise PoolConfigError("auxiliary split is empty")
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    kept, emb, traj, excluded = [], [], [], []
    for i in order:
        t = normalize_trajectory(ys[i], masks[i])
        if t is None:
            excluded.append(tuple(keys[i]))
            continue
        kept.append(tuple(keys[i]))
        emb.append(embeddings[i])
        traj.append(t)
    if not kept:
        raise PoolConfigError("every auxiliary trajectory is fully masked")
    emb = np.array(emb)
    mean, comps = fit_pca(emb, k_pca)
    return RetrievalPool(tuple(kept), emb, np.array(traj), mean, comps, float(tau), fingerprint,
                         source, tuple(excluded))


def similarities(target_emb: np.ndarray, pool: RetrievalPool) -> np.ndarray:
    """Cosine similarity to every pool entry in the pool's PCA space (0 for zero vectors)."""
    if len(pool) == 0:
        return np.zeros(0)
    z = (target_emb - pool.pca_mean) @ pool.pca_components
    zn = np.linalg.norm(z)
    denom = zn * pool.proj_norms
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0, (pool.projected @ z) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(sims, -1.0, 1.0)


@dataclass
class RetrievalReport:
    target: Key
    similarities: np.ndarray
    members: np.ndarray  # indices into pool.keys
    weights: np.ndarray
    fallback: bool

    def member_keys(self, pool: RetrievalPool) -> List[Key]:
        return [pool.keys[i] for i in self.members]


def select_candidates(target_emb: np.ndarray, target_key: Key, pool: RetrievalPool,
                      tau: Optional[float] = None):
    """Similarities and the indices passing ``sim > tau`` minus leakage exclusions."""
    tau = pool.tau if tau is None else tau
    sims = similarities(target_emb, pool)
    keep = [i for i in range(len(pool))
            if sims[i] > tau and pool.keys[i] != tuple(target_key) and pool.keys[i][1] != target_key[1]]
    return sims, np.array(keep, dtype=np.intp)


def retrieve_yearly(target_emb: np.ndarray, target_key: Key, pool: RetrievalPool, params: Params):
    """Yearly context (days,) and report for one target."""
    ctx, reports, _ = yearly_ctx_fwd(target_emb[None], [tuple(target_key)], pool, params)
    return ctx[0], reports[0]


def yearly_ctx_fwd(hy_targets, target_keys: Sequence[Key], pool: RetrievalPool, params: Params,
                   frozen_members: Optional[Mapping[Key, np.ndarray]] = None):
    """Batched yearly context (t, days) with one report per target.

    ``frozen_members`` pins candidate sets (used while finite-differencing).
    """
    n_t = hy_targets.shape[0]
    ctx = np.zeros((n_t, pool.days))
    reports, cache = [], []
    h = hy_targets.shape[-1]
    scale = np.sqrt(h)
    for i, key in enumerate(target_keys):
        sims, members = select_candidates(hy_targets[i], key, pool)
        if frozen_members is not None:
            members = np.asarray(frozen_members[tuple(key)], dtype=np.intp)
        if members.size == 0:
            reports.append(RetrievalReport(tuple(key), sims, members, np.zeros(0), True))
            cache.append(None)
            continue
        keys_raw = pool.embeddings[members]
        keys = keys_raw @ params["ret_y.Wk"]
        q = hy_targets[i] @ params["ret_y.Wq"]
        w = softmax(keys @ q / scale)
        ctx[i] = w @ pool.trajectories[members]
        reports.append(RetrievalReport(tuple(key), sims, members, w, False))
        cache.append((members, keys_raw, keys, q, w))
    return ctx, reports, (hy_targets, cache)


def yearly_ctx_bwd(d_ctx, cache, pool: RetrievalPool, params: Params, grads: Params):
    hy_targets, per_target = cache
    h = hy_targets.shape[-1]
    scale = np.sqrt(h)
    d_hy = np.zeros_like(hy_targets)
    d_wq = np.zeros((h, h))
    d_wk = np.zeros((h, h))
    for i, c in enumerate(per_target):
        if c is None:
            continue
        members, keys_raw, keys, q, w = c
        d_w = pool.trajectories[members] @ d_ctx[i]
        d_s = softmax_bwd(d_w, w) / scale
        d_q = d_s @ keys
        d_keys = np.outer(d_s, q)
        d_wq += np.outer(hy_targets[i], d_q)
        d_wk += keys_raw.T @ d_keys
        d_hy[i] = d_q @ params["ret_y.Wq"].T
    add_grad(grads, "ret_y.Wq", d_wq)
    add_grad(grads, "ret_y.Wk", d_wk)
    return d_hy
