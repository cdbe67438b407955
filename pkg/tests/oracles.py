"""Independent oracles shared by unit and acceptance tests.

Everything here deliberately avoids the closed forms under test: controls are
found by brute-force grid search, gradients by central finite differences.
"""

import numpy as np

from hjival import games


def grid_control_search(spec, lam_own, n=200, zoom_rounds=2, tensor=False):
    """Brute-force maximizer of the control-dependent Hamiltonian objective.

    The objective is additively separable per control axis in every case, so
    per-axis sweeps find the tensor-grid argmax; tensor=True evaluates the
    full n^2 grid instead (2-control cases only; used to cross-check the
    separability shortcut). Each zoom round re-grids around the best point,
    one spacing wide, so the final objective is grid-limited at
    ~(range/n^rounds)^2 curvature error.
    """
    lam_own = np.atleast_2d(lam_own)
    m = lam_own.shape[0]
    lo = np.repeat(spec.control_lo[None, :], m, axis=0).astype(float)
    hi = np.repeat(spec.control_hi[None, :], m, axis=0).astype(float)
    best_u = 0.5 * (lo + hi)
    for _ in range(1 + zoom_rounds):
        if tensor and spec.control_dim == 2:
            g0 = np.linspace(0.0, 1.0, n)
            u0 = lo[:, 0:1] + (hi[:, 0:1] - lo[:, 0:1]) * g0[None, :]
            u1 = lo[:, 1:2] + (hi[:, 1:2] - lo[:, 1:2]) * g0[None, :]
            uu = np.stack([
                np.broadcast_to(u0[:, :, None], (m, n, n)),
                np.broadcast_to(u1[:, None, :], (m, n, n)),
            ], axis=-1)
            obj = games.hamiltonian_control_objective(spec, lam_own[:, None, None, :], uu)
            flat = obj.reshape(m, -1)
            idx = np.argmax(flat, axis=1)
            i0, i1 = np.unravel_index(idx, (n, n))
            best_u = np.stack([u0[np.arange(m), i0], u1[np.arange(m), i1]], axis=-1)
        else:
            cols = []
            for ax in range(spec.control_dim):
                g = lo[:, ax:ax + 1] + (hi[:, ax:ax + 1] - lo[:, ax:ax + 1]) \
                    * np.linspace(0.0, 1.0, n)[None, :]
                u_try = np.repeat(best_u[:, None, :], n, axis=1)
                u_try[:, :, ax] = g
                obj = games.hamiltonian_control_objective(spec, lam_own[:, None, :], u_try)
                cols.append(g[np.arange(m), np.argmax(obj, axis=1)])
            best_u = np.stack(cols, axis=-1)
        span = (hi - lo) / (n - 1)
        lo = np.maximum(spec.control_lo[None, :], best_u - span)
        hi = np.minimum(spec.control_hi[None, :], best_u + span)
    return best_u, games.hamiltonian_control_objective(spec, lam_own, best_u)


def random_costates(spec, n, rng):
    """Costate own-blocks at mixed scales so both interior and clipped optima occur."""
    scales = rng.choice([1.0, 10.0, 100.0, 1000.0], size=(n, 1))
    return rng.standard_normal((n, spec.state_dim)) * scales


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar fn at 1-D point x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        grad[k] = (fn(xp) - fn(xm)) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
