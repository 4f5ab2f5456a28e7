from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from raci.nn import (dropout_mask, init_lstm, init_mlp2, lstm_head_bwd, lstm_head_fwd, masked_softmax,
                     mlp2_bwd, mlp2_fwd, segment_softmax, softmax, softplus)
from raci.core import CalendarSpec


def test_softplus_zero_and_large():
    assert softplus(0.0) == pytest.approx(np.log(2.0), rel=0, abs=0)
    assert softplus(800.0) == 800.0
    assert 0.0 <= softplus(-800.0) < 1e-300


@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(s):
    w = softmax(s)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_masked_softmax_all_invalid_row_is_zero():
    s = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    valid = np.array([[True, False, True], [False, False, False]])
    w = masked_softmax(s, valid)
    assert w[0, 1] == 0.0
    assert w[0].sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(w[1], 0.0)


def test_segment_softmax_sums_to_one_per_month():
    cal = CalendarSpec()
    s = np.random.default_rng(0).normal(size=(3, 365)) * 5
    w = segment_softmax(s, cal.month_starts, cal.day_to_month)
    sums = np.add.reduceat(w, cal.month_starts, axis=-1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_dropout_inactive_without_rng_or_p():
    assert dropout_mask(None, 0.5, (3,)) is None
    assert dropout_mask(np.random.default_rng(0), 0.0, (3,)) is None


def test_dropout_scales_survivors():
    m = dropout_mask(np.random.default_rng(0), 0.25, (20000,))
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert abs((m == 0).mean() - 0.25) < 0.02


def test_mlp2_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    params = {}
    init_mlp2(params, rng, "m", 3, 4, 2)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 2))
    y, cache = mlp2_fwd(x, params, "m")
    grads = {}
    dx = mlp2_bwd(w, cache, params, grads, "m")

    def loss():
        return float((mlp2_fwd(x, params, "m")[0] * w).sum())

    eps = 1e-6
    for name, arr in params.items():
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + eps
            lp = loss()
            arr.flat[i] = old - eps
            lm = loss()
            arr.flat[i] = old
            assert grads[name].flat[i] == pytest.approx((lp - lm) / (2 * eps), rel=1e-6, abs=1e-9)
    xp = x.copy()
    xp[2, 1] += eps
    xm = x.copy()
    xm[2, 1] -= eps
    fd = (float((mlp2_fwd(xp, params, "m")[0] * w).sum()) - float((mlp2_fwd(xm, params, "m")[0] * w).sum())) / (2 * eps)
    assert dx[2, 1] == pytest.approx(fd, rel=1e-6)


def test_lstm_single_step_by_hand():
    # one layer, hidden 1, input 1: every gate pre-activation is set by hand
    params = {"l0.Wx": np.array([[0.5, -1.0, 2.0, 1.0]]), "l0.Wh": np.zeros((1, 4)),
              "l0.b": np.array([0.0, 0.0, 0.0, 0.25]), "out.W": np.array([[2.0]]), "out.b": np.array([0.1])}
    x = np.array([[[1.0]]])
    yhat, _ = lstm_head_fwd(x, params, "l", 1)
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    c = sig(0.5) * np.tanh(1.25)
    h = sig(2.0) * np.tanh(c)
    assert yhat.shape == (1, 1)
    assert yhat[0, 0] == pytest.approx(2.0 * h + 0.1, rel=1e-14)


def test_lstm_zero_readout_gives_zero():
    rng = np.random.default_rng(0)
    params = {}
    init_lstm(params, rng, "l", 3, 4, 2)
    params["out.W"][:] = 0
    params["out.b"][:] = 0
    yhat, _ = lstm_head_fwd(rng.normal(size=(2, 9, 3)), params, "l", 2)
    np.testing.assert_array_equal(yhat, 0.0)


def test_lstm_head_input_gradient():
    rng = np.random.default_rng(3)
    params = {}
    init_lstm(params, rng, "l", 2, 3, 2)
    x = rng.normal(size=(2, 5, 2))
    w = rng.normal(size=(2, 5))
    yhat, cache = lstm_head_fwd(x, params, "l", 2)
    dx = lstm_head_bwd(w, cache, params, {}, "l", 2)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 4, 1), (0, 2, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = ((lstm_head_fwd(xp, params, "l", 2)[0] * w).sum() - (lstm_head_fwd(xm, params, "l", 2)[0] * w).sum()) / (2 * eps)
        assert dx[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)
