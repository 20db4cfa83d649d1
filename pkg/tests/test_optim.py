import numpy as np
import pytest

from nerveseg.exceptions import DivergenceError, DomainError, ShapeError
from nerveseg.optim import adam_init, adam_step


@pytest.fixture
def params() -> dict[str, np.ndarray]:
    return {"w": np.zeros((2, 3), dtype=np.float32), "b": np.ones(3, dtype=np.float32)}


def test_init_zeroes_moments(params: dict[str, np.ndarray]) -> None:
    state = adam_init(params)
    assert state.t == 0
    assert (state.lr, state.beta1, state.beta2, state.eps) == (1e-3, 0.9, 0.999, 1e-8)
    for name, value in params.items():
        assert state.m[name].shape == value.shape
        assert not state.m[name].any()
        assert not state.v[name].any()


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_init_rejects_non_positive_lr(params: dict[str, np.ndarray], lr: float) -> None:
    with pytest.raises(DomainError):
        adam_init(params, lr=lr)


def test_zero_gradient_leaves_params(params: dict[str, np.ndarray]) -> None:
    before = {name: value.copy() for name, value in params.items()}
    state = adam_init(params)
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    adam_step(params, grads, state)
    assert state.t == 1
    for name in params:
        np.testing.assert_array_equal(params[name], before[name])


def test_first_step_size() -> None:
    params = {"p": np.zeros(1, dtype=np.float32)}
    state = adam_init(params, lr=0.001)
    adam_step(params, {"p": np.ones(1, dtype=np.float32)}, state)
    np.testing.assert_allclose(params["p"], [-0.001 / (1 + 1e-8)], rtol=1e-6)


def test_first_step_is_bounded_by_lr() -> None:
    rng = np.random.default_rng(0)
    params = {"p": rng.standard_normal(1000)}
    before = params["p"].copy()
    state = adam_init(params, lr=0.01)
    adam_step(params, {"p": rng.standard_normal(1000) * 100}, state)
    assert np.all(np.abs(params["p"] - before) <= 1.01 * 0.01)


def test_constant_gradient_steps_approach_lr() -> None:
    params = {"p": np.zeros(1)}
    state = adam_init(params, lr=0.01)
    previous = 0.0
    for _ in range(200):
        adam_step(params, {"p": np.full(1, -2.0)}, state)
        delta = float(params["p"][0]) - previous
        previous = float(params["p"][0])
    assert delta == pytest.approx(0.01, rel=1e-6)


def test_quadratic_converges() -> None:
    params = {"theta": np.zeros(1)}
    state = adam_init(params, lr=0.05)
    for _ in range(500):
        adam_step(params, {"theta": 2 * (params["theta"] - 3)}, state)
    assert abs(params["theta"][0] - 3) < 0.01


def test_identical_runs_match() -> None:
    results = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        params = {"p": np.zeros((4, 4), dtype=np.float32)}
        state = adam_init(params)
        for _ in range(10):
            adam_step(params, {"p": rng.standard_normal((4, 4)).astype(np.float32)}, state)
        results.append(params["p"])
    np.testing.assert_array_equal(*results)


def test_nan_gradient_aborts_without_update(params: dict[str, np.ndarray]) -> None:
    state = adam_init(params)
    grads = {name: np.ones_like(value) for name, value in params.items()}
    grads["b"][1] = np.nan
    with pytest.raises(DivergenceError):
        adam_step(params, grads, state)
    assert state.t == 0
    assert not params["w"].any()


def test_gradient_dims_must_match(params: dict[str, np.ndarray]) -> None:
    state = adam_init(params)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros((3, 2), dtype=np.float32), "b": np.zeros(3)}, state)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros((2, 3), dtype=np.float32)}, state)
