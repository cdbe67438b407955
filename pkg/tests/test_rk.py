import numpy as np
import pytest
from scipy.integrate import solve_ivp

from hjival import rk
from hjival.errors import NumericalError


def test_exponential_decay():
    y1 = rk.integrate(lambda y: -y, np.ones((1, 3)), 0.0, 2.0)
    np.testing.assert_allclose(y1, np.exp(-2.0) * np.ones((1, 3)), rtol=1e-7)


def test_matches_scipy_on_stiffish_oscillator():
    def f(y):
        x, v = y[..., 0], y[..., 1]
        return np.stack([v, -25.0 * x - 0.3 * v + np.sin(3.0 * x)], axis=-1)

    y0 = np.array([1.0, 0.0])
    mine = rk.integrate(f, y0[None, :], 0.0, 4.0, rtol=1e-10, atol=1e-10)[0]
    ref = solve_ivp(lambda t, y: f(y), (0, 4.0), y0, rtol=1e-12, atol=1e-12).y[:, -1]
    np.testing.assert_allclose(mine, ref, rtol=1e-7, atol=1e-9)


def test_path_grid_values():
    times = np.linspace(0.0, 1.0, 11)
    path = rk.integrate_path(lambda y: -2.0 * y, np.array([[1.0]]), times)
    np.testing.assert_allclose(path[:, 0, 0], np.exp(-2.0 * times), rtol=1e-7)


def test_batch_rows_independent():
    # batched integration must equal row-by-row integration to high accuracy
    def f(y):
        return np.stack([y[..., 1], -y[..., 0]], axis=-1)

    y0 = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    batch = rk.integrate(f, y0, 0.0, 3.0)
    for i in range(3):
        single = rk.integrate(f, y0[i][None, :], 0.0, 3.0)[0]
        np.testing.assert_allclose(batch[i], single, rtol=1e-6, atol=1e-9)


def test_zero_span_is_identity():
    y0 = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_array_equal(rk.integrate(lambda y: y, y0, 1.0, 1.0), y0)


def test_nonfinite_detected():
    with pytest.raises(NumericalError):
        rk.integrate(lambda y: y ** 2, np.array([[1.0]]), 0.0, 5.0)


def test_rk4_step_order():
    # halving dt should shrink the error by ~16x on a smooth problem
    f = lambda y: np.stack([y[..., 1], -y[..., 0]], axis=-1)
    y0 = np.array([[1.0, 0.0]])
    exact = np.array([np.cos(0.2), -np.sin(0.2)])

    def err(dt):
        y = y0.copy()
        for _ in range(int(round(0.2 / dt))):
            y = rk.rk4_step(f, y, dt)
        return np.abs(y[0] - exact).max()

    assert err(0.01) / err(0.005) == pytest.approx(16.0, rel=0.3)
