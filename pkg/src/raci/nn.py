"""Differentiable building blocks with explicit forward/backward pairs.

Every ``*_fwd`` returns ``(output, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns input gradients, accumulating
parameter gradients into a ``grads`` dict keyed like the parameter dict.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import kernels

Params = Dict[str, np.ndarray]


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def add_grad(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = np.array(g, dtype=np.float64)


# ---------------------------------------------------------------------------
# two-layer perceptron: tanh(x W1 + b1) W2 + b2
# ---------------------------------------------------------------------------


def init_mlp2(params: Params, rng, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    params[f"{prefix}.W1"] = uniform_init(rng, d_in, (d_in, d_hidden))
    params[f"{prefix}.b1"] = uniform_init(rng, d_in, (d_hidden,))
    params[f"{prefix}.W2"] = uniform_init(rng, d_hidden, (d_hidden, d_out))
    params[f"{prefix}.b2"] = uniform_init(rng, d_hidden, (d_out,))


def mlp2_fwd(x, params: Params, prefix: str):
    a = np.tanh(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    y = a @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]
    return y, (x, a)


def mlp2_bwd(dy, cache, params: Params, grads: Params, prefix: str):
    x, a = cache
    d_in = x.shape[-1]
    x2 = x.reshape(-1, d_in)
    a2 = a.reshape(-1, a.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    add_grad(grads, f"{prefix}.W2", a2.T @ dy2)
    add_grad(grads, f"{prefix}.b2", dy2.sum(axis=0))
    dz = (dy2 @ params[f"{prefix}.W2"].T) * (1.0 - a2 * a2)
    add_grad(grads, f"{prefix}.W1", x2.T @ dz)
    add_grad(grads, f"{prefix}.b1", dz.sum(axis=0))
    return (dz @ params[f"{prefix}.W1"].T).reshape(x.shape)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout_mask(rng: Optional[np.random.Generator], p: float, shape) -> Optional[np.ndarray]:
    """Inverted-dropout multiplier, or None when dropout is inactive."""
    if rng is None or p <= 0.0:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def apply_mask(x, mask):
    return x if mask is None else x * mask


# ---------------------------------------------------------------------------
# softmax variants
# ---------------------------------------------------------------------------


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dw, w, axis=-1):
    return w * (dw - (dw * w).sum(axis=axis, keepdims=True))


def masked_softmax(s, valid, axis=-1):
    """Softmax over entries where ``valid``; rows with no valid entry give all zeros."""
    s = np.where(valid, s, -np.inf)
    top = s.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(valid, np.exp(s - top), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    return e / np.where(tot > 0, tot, 1.0)


def segment_softmax(s, starts, day_to_month):
    """Softmax of ``s`` (..., days) within contiguous month segments."""
    n_months = len(starts)
    seg_max = np.maximum.reduceat(s, starts, axis=-1)
    e = np.exp(s - seg_max[..., day_to_month])
    tot = np.add.reduceat(e, starts, axis=-1)
    assert tot.shape[-1] == n_months
    return e / tot[..., day_to_month]


def segment_softmax_bwd(dw, w, starts, day_to_month):
    inner = np.add.reduceat(dw * w, starts, axis=-1)
    return w * (dw - inner[..., day_to_month])


# ---------------------------------------------------------------------------
# stacked LSTM with affine per-day readout
# ---------------------------------------------------------------------------


def init_lstm(params: Params, rng, prefix: str, d_in: int, hidden: int, layers: int) -> None:
    for layer in range(layers):
        width = d_in if layer == 0 else hidden
        fan_in = width + hidden
        params[f"{prefix}{layer}.Wx"] = uniform_init(rng, fan_in, (width, 4 * hidden))
        params[f"{prefix}{layer}.Wh"] = uniform_init(rng, fan_in, (hidden, 4 * hidden))
        params[f"{prefix}{layer}.b"] = uniform_init(rng, fan_in, (4 * hidden,))
    params["out.W"] = uniform_init(rng, hidden, (hidden, 1))
    params["out.b"] = uniform_init(rng, hidden, (1,))


def lstm_head_fwd(x, params: Params, prefix: str, layers: int, p_drop: float = 0.0,
                  rng: Optional[np.random.Generator] = None):
    """Run the stack over ``x`` (batch, days, d_in); returns predictions (batch, days)."""
    seq = np.ascontiguousarray(np.transpose(x, (1, 0, 2)))
    caches = []
    for layer in range(layers):
        wx = params[f"{prefix}{layer}.Wx"]
        xproj = np.ascontiguousarray(seq @ wx + params[f"{prefix}{layer}.b"])
        hs, cs, gates = kernels.lstm_forward(xproj, params[f"{prefix}{layer}.Wh"])
        mask = dropout_mask(rng, p_drop, hs.shape) if layer < layers - 1 else None
        caches.append((seq, hs, cs, gates, mask))
        seq = apply_mask(hs, mask)
    yhat = (seq @ params["out.W"])[..., 0] + params["out.b"][0]
    return np.ascontiguousarray(yhat.T), (caches, seq)


def lstm_head_bwd(dyhat, cache, params: Params, grads: Params, prefix: str, layers: int):
    """Backprop ``dyhat`` (batch, days); returns d input (batch, days, d_in)."""
    caches, top = cache
    dy_t = dyhat.T
    add_grad(grads, "out.W", np.tensordot(top, dy_t, axes=([0, 1], [0, 1]))[:, None])
    add_grad(grads, "out.b", np.array([dy_t.sum()]))
    dseq = dy_t[..., None] * params["out.W"][:, 0]
    for layer in range(layers - 1, -1, -1):
        seq_in, hs, cs, gates, mask = caches[layer]
        dhs = np.ascontiguousarray(apply_mask(dseq, mask))
        dxproj, dwh = kernels.lstm_backward(dhs, params[f"{prefix}{layer}.Wh"], hs, cs, gates)
        add_grad(grads, f"{prefix}{layer}.Wh", dwh)
        flat_in = seq_in.reshape(-1, seq_in.shape[-1])
        flat_dz = dxproj.reshape(-1, dxproj.shape[-1])
        add_grad(grads, f"{prefix}{layer}.Wx", flat_in.T @ flat_dz)
        add_grad(grads, f"{prefix}{layer}.b", flat_dz.sum(axis=0))
        dseq = dxproj @ params[f"{prefix}{layer}.Wx"].T
    return np.transpose(dseq, (1, 0, 2))
