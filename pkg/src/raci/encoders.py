"""Per-scale feature encoders: daily, monthly and regime (yearly + static).

Each encoder is ``tanh(x W1 + b1) W2 + b2`` applied row-wise, stored in the
shared parameter dict under ``enc_d``, ``enc_m`` and ``enc_r``.
"""

from __future__ import annotations

import numpy as np

from .nn import Params, init_mlp2, mlp2_bwd, mlp2_fwd

ENCODERS = {"daily": "enc_d", "monthly": "enc_m", "regime": "enc_r"}


def init_encoders(params: Params, rng, d_daily: int, d_monthly: int, d_regime: int, h: int) -> None:
    init_mlp2(params, rng, "enc_d", d_daily, h, h)
    init_mlp2(params, rng, "enc_m", d_monthly, h, h)
    init_mlp2(params, rng, "enc_r", d_regime, h, h)


def _check(x: np.ndarray, params: Params, prefix: str) -> None:
    want = params[f"{prefix}.W1"].shape[0]
    if x.shape[-1] != want:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} does not match encoder width {want}")


def embed(x: np.ndarray, params: Params, prefix: str):
    _check(x, params, prefix)
    return mlp2_fwd(x, params, prefix)


def embed_daily(x_daily: np.ndarray, params: Params) -> np.ndarray:
    return embed(x_daily, params, "enc_d")[0]


def embed_monthly(x_monthly: np.ndarray, params: Params) -> np.ndarray:
    return embed(x_monthly, params, "enc_m")[0]


def embed_regime(x_regime: np.ndarray, params: Params) -> np.ndarray:
    """Encode the joint regime vector ``concat(x_yearly, x_static)``."""
    return embed(x_regime, params, "enc_r")[0]


def embed_bwd(dy, cache, params: Params, grads: Params, prefix: str):
    return mlp2_bwd(dy, cache, params, grads, prefix)
