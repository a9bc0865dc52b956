import math

import numpy as np
import pytest

from forgetloc.engine.optim import AdamState, Optimizer, adam_step, sgd_step
from forgetloc.models.schemas import OptimizerKind, TrainConfig
from forgetloc.utils.exceptions import InvalidInputError


def test_adam_first_step_is_lr_times_sign():
    """Bias correction makes the first step about -lr * sign(g)"""
    params = {"w": np.array([0.5])}
    delta = adam_step(AdamState(), {"w": np.array([0.3])}, params)
    assert delta.deltas["w"][0] == pytest.approx(-0.001, rel=1e-6)
    assert params["w"][0] == pytest.approx(0.499, rel=1e-9)


def test_adam_zero_gradient_on_fresh_state():
    """No gradient, no movement"""
    params = {"w": np.array([1.0, -1.0])}
    delta = adam_step(AdamState(), {"w": np.zeros(2)}, params)
    assert delta.is_zero()
    assert np.array_equal(params["w"], [1.0, -1.0])


def test_adam_matches_hand_rolled_recurrence():
    """Five steps on L = theta^2 / 2 from theta = 1"""
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in range(1, 6):
        g = theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta)

    state, params = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps), {"theta": np.array([1.0])}
    for t in range(5):
        adam_step(state, {"theta": params["theta"].copy()}, params)
        assert params["theta"][0] == pytest.approx(expected[t], abs=1e-12)
    assert state.t == 5


def test_adam_step_size_bound():
    """Per-coordinate steps stay within lr * (1 - beta1) / sqrt(1 - beta2)"""
    rng = np.random.default_rng(0)
    state, params = AdamState(), {"w": rng.normal(size=50)}
    for _ in range(30):
        delta = adam_step(state, {"w": rng.normal(scale=10.0, size=50)}, params)
        assert np.all(np.abs(delta.deltas["w"]) <= 0.001 * (1 - 0.9) / math.sqrt(1 - 0.999) + 1e-12)


def test_sgd_definition():
    """Delta is -lr * grad"""
    params = {"w": np.array([0.0, 0.0])}
    delta = sgd_step(0.1, {"w": np.array([2.0, -4.0])}, params)
    assert np.allclose(delta.deltas["w"], [-0.2, 0.4], rtol=0, atol=1e-15)


def test_sgd_zero_rate():
    """lr = 0 leaves parameters untouched"""
    params = {"w": np.array([1.0])}
    assert sgd_step(0.0, {"w": np.array([5.0])}, params).is_zero()


def test_sgd_quadratic_bowl_contracts():
    """100 steps of lr 0.1 on theta^2 / 2: theta = 0.9^100"""
    params = {"w": np.array([1.0])}
    for _ in range(100):
        sgd_step(0.1, {"w": params["w"].copy()}, params)
    assert abs(params["w"][0]) <= 1e-4
    assert params["w"][0] == pytest.approx(0.9 ** 100, rel=1e-10)


def test_delta_is_exact_record():
    """Replaying deltas from the start reproduces the final parameters bit for bit"""
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    start = {n: v.copy() for n, v in params.items()}
    state, deltas = AdamState(lr=0.01), []
    for _ in range(20):
        delta = adam_step(state, {n: rng.normal(size=v.shape) for n, v in params.items()}, params)
        assert all(np.array_equal(delta.after()[n], params[n]) for n in params)
        deltas.append(delta)

    replayed = {n: v.copy() for n, v in start.items()}
    for delta in deltas:
        for n, d in delta.deltas.items():
            replayed[n] = replayed[n] + d
    assert all(np.array_equal(replayed[n], params[n]) for n in params)


def test_shape_mismatch_rejected():
    """Gradients must be shaped like their parameters"""
    with pytest.raises(InvalidInputError):
        adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(2)})
    with pytest.raises(InvalidInputError):
        sgd_step(0.1, {"missing": np.zeros(2)}, {"w": np.zeros(2)})


def test_optimizer_moves_only_given_blocks():
    """Blocks absent from the gradients keep their values exactly"""
    params = {"trunk": np.ones(3), "other_head": np.ones(2)}
    optimizer = Optimizer(TrainConfig())
    delta = optimizer.step({"trunk": np.ones(3)}, params)
    assert set(delta.deltas) == {"trunk"}
    assert np.array_equal(params["other_head"], np.ones(2))
    assert optimizer.steps == 1


def test_optimizer_selects_sgd():
    """TrainConfig.optimizer = sgd applies plain gradient steps"""
    params = {"w": np.array([1.0])}
    Optimizer(TrainConfig(optimizer=OptimizerKind.SGD, lr=0.5)).step({"w": np.array([1.0])}, params)
    assert params["w"][0] == 0.5
