"""Batched adaptive Dormand-Prince 4(5) integration for autonomous systems.

The boundary-value solver integrates whole bundles of perturbed initial
conditions with a step sequence shared across the batch (error-controlled by
the worst row). Shared steps make forward differences of neighbouring
trajectories smooth in the initial condition, which is what keeps the
finite-difference shooting Jacobian usable at tight tolerances.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def integrate(rhs, y0: np.ndarray, t0: float, t1: float, rtol: float = 1e-8,
              atol: float = 1e-8, max_steps: int = 100_000) -> np.ndarray:
    """Integrate dy/dt = rhs(y) from t0 to t1 for a (batch, dim) array y0."""
    if t1 == t0:
        return np.array(y0, dtype=float, copy=True)
    out = integrate_path(rhs, y0, np.array([t0, t1]), rtol=rtol, atol=atol,
                         max_steps=max_steps)
    return out[-1]


def integrate_path(rhs, y0: np.ndarray, times: np.ndarray, rtol: float = 1e-8,
                   atol: float = 1e-8, max_steps: int = 100_000) -> np.ndarray:
    """Integrate through an increasing time grid, landing exactly on each node.

    Returns an array of shape (len(times),) + y0.shape. Step size adapts
    freely inside each interval; interval endpoints are hit exactly rather
    than interpolated.
    """
    y = np.atleast_2d(np.asarray(y0, dtype=float))
    squeeze = np.asarray(y0).ndim == 1
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be non-decreasing")
    out = np.empty((times.size,) + y.shape)
    out[0] = y
    k1 = rhs(y)
    total = float(times[-1] - times[0])
    h = max(1e-8, 0.01 * total) if total > 0 else 0.0
    nsteps = 0
    for i in range(1, times.size):
        t, t_end = float(times[i - 1]), float(times[i])
        while t < t_end:
            h = min(h, t_end - t)
            if h < 1e-13 * max(1.0, abs(t_end)):
                raise NumericalError(f"step size underflow at t={t:.6g}")
            k2 = rhs(y + (h * 0.2) * k1)
            k3 = rhs(y + h * (0.075 * k1 + 0.225 * k2))
            k4 = rhs(y + h * ((44 / 45) * k1 - (56 / 15) * k2 + (32 / 9) * k3))
            k5 = rhs(y + h * ((19372 / 6561) * k1 - (25360 / 2187) * k2
                             + (64448 / 6561) * k3 - (212 / 729) * k4))
            k6 = rhs(y + h * ((9017 / 3168) * k1 - (355 / 33) * k2
                             + (46732 / 5247) * k3 + (49 / 176) * k4
                             - (5103 / 18656) * k5))
            y_new = y + h * ((35 / 384) * k1 + (500 / 1113) * k3 + (125 / 192) * k4
                             - (2187 / 6784) * k5 + (11 / 84) * k6)
            k7 = rhs(y_new)
            err_vec = h * ((71 / 57600) * k1 - (71 / 16695) * k3 + (71 / 1920) * k4
                           - (17253 / 339200) * k5 + (22 / 525) * k6 - 0.025 * k7)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.sqrt(np.mean((err_vec / scale) ** 2, axis=-1)).max()
            if not np.isfinite(err):
                raise NumericalError("non-finite state during integration")
            if err <= 1.0:
                t += h
                y = y_new
                k1 = k7             # FSAL: last stage is rhs(y_new)
            factor = _MAX_FACTOR if err == 0.0 else min(
                _MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err ** -0.2))
            h *= factor
            nsteps += 1
            if nsteps > max_steps:
                raise NumericalError(f"integration exceeded {max_steps} steps")
        out[i] = y
    return out[:, 0, :] if squeeze else out


def rk4_step(rhs, y: np.ndarray, dt: float) -> np.ndarray:
    """One classical fixed RK4 step (controls already baked into rhs)."""
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
