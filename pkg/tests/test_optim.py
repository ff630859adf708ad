import numpy as np
import pytest

from setflow.optim import OptimizerError, adam_step, init_adam


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = init_adam(params, lr=1e-4)
    new, state = adam_step(params, {"w": np.zeros(3)}, params and state)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_first_step_from_zero_state_moves_by_lr():
    # m_hat = v_hat = 1 after one unit-gradient step, so delta = -lr/(1+eps)
    params = {"w": np.array([0.0])}
    state = init_adam(params, lr=1e-4)
    new, _ = adam_step(params, {"w": np.array([1.0])}, state)
    assert abs(new["w"][0] - (-1e-4)) < 1e-9


def test_constant_gradient_step_size_approaches_lr():
    params = {"w": np.array([0.0])}
    state = init_adam(params, lr=1e-4)
    prev = params["w"][0]
    for _ in range(500):
        params, state = adam_step(params, {"w": np.array([1.0])}, state)
        delta = params["w"][0] - prev
        prev = params["w"][0]
    assert abs(abs(delta) - 1e-4) < 0.01 * 1e-4
    assert delta < 0  # moves against the gradient


def test_nonfinite_gradient_aborts_with_name():
    params = {"good": np.zeros(2), "bad": np.zeros(2)}
    state = init_adam(params)
    before = {k: v.copy() for k, v in params.items()}
    with pytest.raises(OptimizerError, match="bad"):
        adam_step(params, {"good": np.zeros(2),
                           "bad": np.array([1.0, np.nan])}, state)
    assert state.step == 0
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_moments_track_shapes_and_step_counts():
    params = {"w": np.zeros((2, 3)), "b": np.zeros(3)}
    state = init_adam(params)
    grads = {"w": np.ones((2, 3)), "b": np.ones(3)}
    params, state = adam_step(params, grads, state)
    params, state = adam_step(params, grads, state)
    assert state.step == 2
    assert state.m["w"].shape == (2, 3) and state.v["b"].shape == (3,)
