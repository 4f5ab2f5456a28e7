"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``RACI_DISABLE_NUMBA`` is unset
(or "0"). Both paths are always importable under explicit names
(``*_numpy`` / ``*_numba``) so they can be cross-checked and benchmarked.

LSTM arrays are time-major: ``xproj`` is (days, batch, 4*hidden) holding the
input projection plus bias, gate order is input, forget, output, candidate.
"""

from __future__ import annotations

import os

import numpy as np

EARTH_RADIUS_KM = 6371.0

try:  # pragma: no cover - exercised implicitly
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("RACI_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def lstm_forward_numpy(xproj: np.ndarray, wh: np.ndarray):
    n_days, batch, four_h = xproj.shape
    hid = four_h // 4
    hs = np.zeros((n_days, batch, hid))
    cs = np.zeros((n_days, batch, hid))
    gates = np.zeros((n_days, batch, four_h))
    h_prev = np.zeros((batch, hid))
    c_prev = np.zeros((batch, hid))
    for t in range(n_days):
        z = xproj[t] + h_prev @ wh
        g = gates[t]
        g[:, :3 * hid] = _sigmoid(z[:, :3 * hid])
        g[:, 3 * hid:] = np.tanh(z[:, 3 * hid:])
        c_prev = g[:, hid:2 * hid] * c_prev + g[:, :hid] * g[:, 3 * hid:]
        h_prev = g[:, 2 * hid:3 * hid] * np.tanh(c_prev)
        cs[t] = c_prev
        hs[t] = h_prev
    return hs, cs, gates


def lstm_backward_numpy(dhs, wh, hs, cs, gates):
    n_days, batch, hid = hs.shape
    dxproj = np.zeros((n_days, batch, 4 * hid))
    dwh = np.zeros_like(wh)
    dh_next = np.zeros((batch, hid))
    dc_next = np.zeros((batch, hid))
    zeros = np.zeros((batch, hid))
    for t in range(n_days - 1, -1, -1):
        g = gates[t]
        i, f, o, c_hat = g[:, :hid], g[:, hid:2 * hid], g[:, 2 * hid:3 * hid], g[:, 3 * hid:]
        c_prev = cs[t - 1] if t > 0 else zeros
        h_prev = hs[t - 1] if t > 0 else zeros
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dxproj[t]
        dz[:, :hid] = dc * c_hat * i * (1.0 - i)
        dz[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * hid:3 * hid] = dh * tc * o * (1.0 - o)
        dz[:, 3 * hid:] = dc * i * (1.0 - c_hat * c_hat)
        dc_next = dc * f
        dwh += h_prev.T @ dz
        dh_next = dz @ wh.T
    return dxproj, dwh


def haversine_matrix_numpy(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    phi = np.radians(lat)
    lam = np.radians(lon)
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @numba.njit(cache=True, inline="always")
    def _sig_scalar(z):
        # exp is much cheaper than scalar tanh in compiled loops
        if z >= 0.0:
            return 1.0 / (1.0 + np.exp(-z))
        e = np.exp(z)
        return e / (1.0 + e)

    @numba.njit(cache=True, inline="always")
    def _tanh_scalar(z):
        e = np.exp(-2.0 * abs(z))
        t = (1.0 - e) / (1.0 + e)
        return t if z >= 0.0 else -t

    @numba.njit(cache=True)
    def lstm_forward_numba(xproj, wh):
        n_days, batch, four_h = xproj.shape
        hid = four_h // 4
        hs = np.zeros((n_days, batch, hid))
        cs = np.zeros((n_days, batch, hid))
        gates = np.zeros((n_days, batch, four_h))
        h_prev = np.zeros((batch, hid))
        c_prev = np.zeros((batch, hid))
        for t in range(n_days):
            z = np.dot(h_prev, wh)
            z += xproj[t]
            for b in range(batch):
                for j in range(hid):
                    gi = _sig_scalar(z[b, j])
                    gf = _sig_scalar(z[b, hid + j])
                    go = _sig_scalar(z[b, 2 * hid + j])
                    gg = _tanh_scalar(z[b, 3 * hid + j])
                    c = gf * c_prev[b, j] + gi * gg
                    gates[t, b, j] = gi
                    gates[t, b, hid + j] = gf
                    gates[t, b, 2 * hid + j] = go
                    gates[t, b, 3 * hid + j] = gg
                    hv = go * _tanh_scalar(c)
                    cs[t, b, j] = c
                    hs[t, b, j] = hv
                    c_prev[b, j] = c
                    h_prev[b, j] = hv
        return hs, cs, gates

    @numba.njit(cache=True)
    def lstm_backward_numba(dhs, wh, hs, cs, gates):
        n_days, batch, hid = hs.shape
        dxproj = np.zeros((n_days, batch, 4 * hid))
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((batch, hid))
        dc_next = np.zeros((batch, hid))
        wh_t = np.ascontiguousarray(wh.T)
        for t in range(n_days - 1, -1, -1):
            dz = np.empty((batch, 4 * hid))
            for b in range(batch):
                for j in range(hid):
                    i = gates[t, b, j]
                    f = gates[t, b, hid + j]
                    o = gates[t, b, 2 * hid + j]
                    g = gates[t, b, 3 * hid + j]
                    c_prev = cs[t - 1, b, j] if t > 0 else 0.0
                    tc = _tanh_scalar(cs[t, b, j])
                    dh = dhs[t, b, j] + dh_next[b, j]
                    dc = dc_next[b, j] + dh * o * (1.0 - tc * tc)
                    dz[b, j] = dc * g * i * (1.0 - i)
                    dz[b, hid + j] = dc * c_prev * f * (1.0 - f)
                    dz[b, 2 * hid + j] = dh * tc * o * (1.0 - o)
                    dz[b, 3 * hid + j] = dc * i * (1.0 - g * g)
                    dc_next[b, j] = dc * f
            dxproj[t] = dz
            if t > 0:
                dwh += np.dot(np.ascontiguousarray(hs[t - 1].T), dz)
            dh_next = np.dot(dz, wh_t)
        return dxproj, dwh

    @numba.njit(cache=True)
    def haversine_matrix_numba(lat, lon):
        n = lat.shape[0]
        out = np.zeros((n, n))
        phi = np.radians(lat)
        lam = np.radians(lon)
        for a in range(n):
            for b in range(a + 1, n):
                s1 = np.sin((phi[a] - phi[b]) / 2.0)
                s2 = np.sin((lam[a] - lam[b]) / 2.0)
                h = s1 * s1 + np.cos(phi[a]) * np.cos(phi[b]) * s2 * s2
                h = min(max(h, 0.0), 1.0)
                d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
                out[a, b] = d
                out[b, a] = d
        return out

else:  # pragma: no cover
    lstm_forward_numba = lstm_forward_numpy
    lstm_backward_numba = lstm_backward_numpy
    haversine_matrix_numba = haversine_matrix_numpy


if USE_NUMBA:
    lstm_forward = lstm_forward_numba
    lstm_backward = lstm_backward_numba
    haversine_matrix = haversine_matrix_numba
else:
    lstm_forward = lstm_forward_numpy
    lstm_backward = lstm_backward_numpy
    haversine_matrix = haversine_matrix_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
