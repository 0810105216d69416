import math

import numpy as np
import pytest

from blocklora.errors import RangeError
from blocklora.optim import OptimizerState, Schedule, adamw_step, cosine_lr


def test_single_step_closed_form():
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    state = OptimizerState(weight_decay=0.0)
    out = adamw_step({"p": np.array([[1.0]])}, {"p": np.array([[1.0]])}, state, lr=0.1)
    assert abs(out["p"][0, 0] - 0.900000001) <= 1e-12
    assert state.step == 1


def test_decoupled_decay_only():
    state = OptimizerState(weight_decay=0.01)
    out = adamw_step({"p": np.array([[2.0]])}, {"p": np.array([[0.0]])}, state, lr=0.5)
    assert out["p"][0, 0] == 2.0 * (1 - 0.5 * 0.01)


def test_zero_lr_leaves_params():
    p = np.array([[1.5, -2.0]])
    state = OptimizerState()
    out = adamw_step({"p": p}, {"p": np.array([[3.0, 4.0]])}, state, lr=0.0)
    assert out["p"] is p
    assert np.allclose(state.exp_avg["p"], [[0.3, 0.4]], rtol=0, atol=1e-15)


def test_reference_loop():
    """Compare three steps against a scalar reimplementation."""
    rng = np.random.default_rng(0)
    p = rng.normal(size=(2, 2))
    grads = [rng.normal(size=(2, 2)) for _ in range(3)]
    state = OptimizerState()
    params = {"p": p}
    for g in grads:
        params = adamw_step(params, {"p": g}, state, lr=0.01)
    for idx in np.ndindex(p.shape):
        x, m, v = p[idx], 0.0, 0.0
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g[idx]
            v = 0.999 * v + 0.001 * g[idx] ** 2
            x = x * (1 - 0.01 * 0.01) - 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(params["p"][idx] - x) <= 1e-14


def test_cosine_schedule():
    s = Schedule(base_lr=1.0, total_steps=10)
    assert cosine_lr(0, s) == 1.0
    assert abs(cosine_lr(5, s) - 0.5) <= 1e-15
    assert abs(cosine_lr(10, s)) <= 1e-15
    lrs = [cosine_lr(t, s) for t in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(RangeError):
        cosine_lr(11, s)
    with pytest.raises(RangeError):
        cosine_lr(-1, s)
