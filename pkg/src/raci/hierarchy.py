"""Role-separating temporal hierarchy.

Fine-to-coarse aggregation uses single-head scaled dot-product attention with
a residual from the coarse-scale encoder; coarse-to-fine propagation adds the
coarse state scaled by a non-negative softplus gate that is not normalized
across time steps.

The batched ``*_fwd`` / ``*_bwd`` functions carry a leading sample axis. The
unbatched wrappers (``attend``, ``aggregate_daily_to_monthly`` ...) take one
site-year and are the public, inspection-friendly surface.
"""

from __future__ import annotations

import numpy as np

from .core import CalendarSpec
from .nn import (Params, add_grad, init_mlp2, mlp2_bwd, mlp2_fwd, segment_softmax,
                 segment_softmax_bwd, sigmoid, softmax, softmax_bwd, softplus, uniform_init)

ATTENTION_BLOCKS = ("agg_dm", "agg_my")
GATE_BLOCKS = ("gate_ym", "gate_md")


class EmptyKeysError(ValueError):
    pass


def init_attention(params: Params, rng, prefix: str, h: int) -> None:
    params[f"{prefix}.Wq"] = uniform_init(rng, h, (h, h))
    params[f"{prefix}.Wk"] = uniform_init(rng, h, (h, h))


def init_gate(params: Params, rng, prefix: str, h: int) -> None:
    init_mlp2(params, rng, prefix, 2 * h, h, 1)


def init_hierarchy(params: Params, rng, h: int) -> None:
    for name in ATTENTION_BLOCKS:
        init_attention(params, rng, name, h)
    for name in GATE_BLOCKS:
        init_gate(params, rng, name, h)


# ---------------------------------------------------------------------------
# single-query attention
# ---------------------------------------------------------------------------


def attend(query: np.ndarray, keys: np.ndarray, wq: np.ndarray, wk: np.ndarray):
    """Attention of one query over ``keys`` (n, h).

    Returns ``(context, weights)`` with ``weights = softmax((q Wq).(k_i Wk) / sqrt(h))``
    and ``context = sum_i weights_i * key_i``.
    """
    keys = np.atleast_2d(keys)
    if keys.shape[0] == 0:
        raise EmptyKeysError("attention needs at least one key")
    h = query.shape[-1]
    scores = (keys @ wk) @ (query @ wq) / np.sqrt(h)
    w = softmax(scores)
    return w @ keys, w


# ---------------------------------------------------------------------------
# daily -> monthly aggregation
# ---------------------------------------------------------------------------


def agg_daily_monthly_fwd(e_daily, e_monthly, calendar: CalendarSpec, params: Params,
                          temporal: bool = True):
    """Monthly embeddings (n, 12, h) from daily (n, days, h) and monthly encoder output."""
    starts = calendar.month_starts
    d2m = calendar.day_to_month
    if not temporal:
        lengths = np.asarray(calendar.month_lengths, dtype=np.float64)
        mean = np.add.reduceat(e_daily, starts, axis=1) / lengths[:, None]
        alpha = np.broadcast_to(1.0 / lengths[d2m], e_daily.shape[:2]).copy()
        return mean + e_monthly, alpha, None
    h = e_daily.shape[-1]
    scale = np.sqrt(h)
    keys = e_daily @ params["agg_dm.Wk"]
    queries = e_monthly @ params["agg_dm.Wq"]
    q_day = queries[:, d2m]
    scores = (q_day * keys).sum(-1) / scale
    alpha = segment_softmax(scores, starts, d2m)
    ctx = np.add.reduceat(alpha[..., None] * e_daily, starts, axis=1)
    return ctx + e_monthly, alpha, (e_daily, e_monthly, keys, q_day, alpha)


def agg_daily_monthly_bwd(d_hm, cache, calendar: CalendarSpec, params: Params, grads: Params):
    starts = calendar.month_starts
    d2m = calendar.day_to_month
    if cache is None:
        lengths = np.asarray(calendar.month_lengths, dtype=np.float64)
        return d_hm[:, d2m] / lengths[d2m][:, None], d_hm
    e_daily, e_monthly, keys, q_day, alpha = cache
    scale = np.sqrt(e_daily.shape[-1])
    d_ctx_day = d_hm[:, d2m]
    d_ed = alpha[..., None] * d_ctx_day
    d_alpha = (d_ctx_day * e_daily).sum(-1)
    d_s = segment_softmax_bwd(d_alpha, alpha, starts, d2m) / scale
    d_qday = d_s[..., None] * keys
    d_keys = d_s[..., None] * q_day
    d_q = np.add.reduceat(d_qday, starts, axis=1)
    h = e_daily.shape[-1]
    add_grad(grads, "agg_dm.Wq", e_monthly.reshape(-1, h).T @ d_q.reshape(-1, h))
    add_grad(grads, "agg_dm.Wk", e_daily.reshape(-1, h).T @ d_keys.reshape(-1, h))
    d_ed = d_ed + d_keys @ params["agg_dm.Wk"].T
    d_em = d_hm + d_q @ params["agg_dm.Wq"].T
    return d_ed, d_em


# ---------------------------------------------------------------------------
# monthly -> yearly aggregation
# ---------------------------------------------------------------------------


def agg_monthly_yearly_fwd(h_monthly, e_regime, params: Params, temporal: bool = True):
    """Yearly embedding (n, h): attention over months queried by the regime encoding."""
    n_months = h_monthly.shape[1]
    if not temporal:
        alpha = np.full(h_monthly.shape[:2], 1.0 / n_months)
        return h_monthly.sum(axis=1) / n_months + e_regime, alpha, None
    scale = np.sqrt(h_monthly.shape[-1])
    q = e_regime @ params["agg_my.Wq"]
    keys = h_monthly @ params["agg_my.Wk"]
    scores = np.einsum("nh,nmh->nm", q, keys) / scale
    alpha = softmax(scores)
    h_yearly = np.einsum("nm,nmh->nh", alpha, h_monthly) + e_regime
    return h_yearly, alpha, (h_monthly, e_regime, q, keys, alpha)


def agg_monthly_yearly_bwd(d_hy, cache, params: Params, grads: Params):
    if cache is None:
        n_months = 12
        return np.repeat(d_hy[:, None, :] / n_months, n_months, axis=1), d_hy
    h_monthly, e_regime, q, keys, alpha = cache
    h = h_monthly.shape[-1]
    scale = np.sqrt(h)
    d_hm = alpha[..., None] * d_hy[:, None, :]
    d_alpha = np.einsum("nh,nmh->nm", d_hy, h_monthly)
    d_s = softmax_bwd(d_alpha, alpha) / scale
    d_q = np.einsum("nm,nmh->nh", d_s, keys)
    d_keys = d_s[..., None] * q[:, None, :]
    add_grad(grads, "agg_my.Wq", e_regime.T @ d_q)
    add_grad(grads, "agg_my.Wk", h_monthly.reshape(-1, h).T @ d_keys.reshape(-1, h))
    d_hm = d_hm + d_keys @ params["agg_my.Wk"].T
    d_er = d_hy + d_q @ params["agg_my.Wq"].T
    return d_hm, d_er


# ---------------------------------------------------------------------------
# gated coarse -> fine propagation
# ---------------------------------------------------------------------------


def gated_add_fwd(coarse, fine, params: Params, prefix: str, gated: bool = True):
    """``fine + beta * coarse`` with ``beta = softplus(gate([coarse, fine]))`` per step.

    ``coarse`` is already aligned to ``fine`` (..., h). With ``gated=False`` the
    gate is fixed at 1 (plain replication).
    """
    if not gated:
        return fine + coarse, np.ones(fine.shape[:-1]), None
    z = np.concatenate([coarse, fine], axis=-1)
    pre, mcache = mlp2_fwd(z, params, prefix)
    pre = pre[..., 0]
    beta = softplus(pre)
    return fine + beta[..., None] * coarse, beta, (coarse, pre, beta, mcache)


def gated_add_bwd(d_out, cache, params: Params, grads: Params, prefix: str):
    """Returns ``(d_coarse, d_fine)``."""
    if cache is None:
        return d_out, d_out
    coarse, pre, beta, mcache = cache
    h = coarse.shape[-1]
    d_beta = (d_out * coarse).sum(-1)
    d_pre = (d_beta * sigmoid(pre))[..., None]
    d_z = mlp2_bwd(d_pre, mcache, params, grads, prefix)
    d_coarse = beta[..., None] * d_out + d_z[..., :h]
    d_fine = d_out + d_z[..., h:]
    return d_coarse, d_fine


def prop_yearly_monthly_fwd(h_yearly, h_monthly, params: Params, temporal: bool = True):
    coarse = np.broadcast_to(h_yearly[:, None, :], h_monthly.shape)
    return gated_add_fwd(coarse, h_monthly, params, "gate_ym", temporal)


def prop_yearly_monthly_bwd(d_out, cache, params: Params, grads: Params):
    d_coarse, d_fine = gated_add_bwd(d_out, cache, params, grads, "gate_ym")
    return d_coarse.sum(axis=1), d_fine


def prop_monthly_daily_fwd(h_monthly_eff, h_daily, calendar: CalendarSpec, params: Params,
                           temporal: bool = True):
    coarse = h_monthly_eff[:, calendar.day_to_month]
    return gated_add_fwd(coarse, h_daily, params, "gate_md", temporal)


def prop_monthly_daily_bwd(d_out, cache, calendar: CalendarSpec, params: Params, grads: Params):
    d_coarse, d_fine = gated_add_bwd(d_out, cache, params, grads, "gate_md")
    return np.add.reduceat(d_coarse, calendar.month_starts, axis=1), d_fine


# ---------------------------------------------------------------------------
# unbatched wrappers
# ---------------------------------------------------------------------------


def aggregate_daily_to_monthly(h_daily, e_monthly, calendar: CalendarSpec, params: Params,
                               temporal: bool = True):
    """Returns ``(h_monthly (12, h), alpha_d2m (days,))`` for one site-year."""
    hm, alpha, _ = agg_daily_monthly_fwd(h_daily[None], e_monthly[None], calendar, params, temporal)
    return hm[0], alpha[0]


def aggregate_monthly_to_yearly(h_monthly, e_regime, params: Params, temporal: bool = True):
    hy, alpha, _ = agg_monthly_yearly_fwd(h_monthly[None], e_regime[None], params, temporal)
    return hy[0], alpha[0]


def propagate_yearly_to_monthly(h_yearly, h_monthly, params: Params, temporal: bool = True):
    out, beta, _ = prop_yearly_monthly_fwd(h_yearly[None], h_monthly[None], params, temporal)
    return out[0], beta[0]


def propagate_monthly_to_daily(h_monthly_eff, h_daily, calendar: CalendarSpec, params: Params,
                               temporal: bool = True):
    out, beta, _ = prop_monthly_daily_fwd(h_monthly_eff[None], h_daily[None], calendar, params,
                                          temporal)
    return out[0], beta[0]
