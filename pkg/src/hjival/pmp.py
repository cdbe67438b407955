"""Coupled two-player Pontryagin boundary-value problems.

The augmented state is [x1, x2, lam1, lam2] where each costate spans the full
joint state (own block first in physical order), because the trained operator
is supervised on gradients of the value w.r.t. the whole joint state. The
solver integrates the PMP convention costate (negated value gradient); emitted
trajectories and samples store values as accumulated cost-to-go and costates
as gradients of that cost-to-go, so controllers must negate stored costates
before feeding the Hamiltonian maximizer. That convention is written into
every dataset header.

Solver: damped-Newton multiple shooting on uniform segments, forward-difference
Jacobians integrated as one shared-step batch, with a penalty continuation
ladder and a horizon-growing fallback ladder.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import games, rk
from .errors import NumericalError


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6                 # max-norm on shooting + boundary residual
    segments: int = 8
    max_newton_iters: int = 25
    max_restarts: int = 2             # horizon-climb escalations per failing stage
    rtol: float = 1e-8
    atol: float = 1e-8
    coarse_rtol: float = 1e-6         # intermediate continuation stages only
    polish_rtol: float = 1e-11        # final Newton polish + grid pass
    penalty_ladder: tuple[float, ...] = (1e2, 1e3)
    horizon_stages: int = 4
    fd_step: float = 1e-7
    max_fail_fraction: float = 0.5


@dataclasses.dataclass
class PmpProblem:
    """Callable bundle defining one two-player PMP system.

    All callables are batched over a leading axis. `penalty`/`penalty_grad`
    act on the joint state and are shared by both players (true for every
    case study; tests may supply anything, including zero).
    """

    state_dim: int
    dynamics: Callable
    dyn_jac: Callable
    control: Callable                 # PMP costate own-block -> control
    loss_u: Callable                  # control-effort running loss
    penalty: Callable
    penalty_grad: Callable
    terminal_value: Callable          # (x, slot) -> scalar
    terminal_grad: Callable           # (x, slot) -> (..., state_dim)
    loss_x: Callable | None = None    # optional state-dependent running loss
    loss_x_grad: Callable | None = None
    rhs_fast: Callable | None = None  # case-specialized override of rhs()

    @property
    def aug_dim(self) -> int:
        return 6 * self.state_dim

    def rhs(self, y: np.ndarray) -> np.ndarray:
        """Batched augmented derivative for (B, 6*state_dim) arrays."""
        if self.rhs_fast is not None:
            return self.rhs_fast(y)
        return self.rhs_generic(y)

    def rhs_generic(self, y: np.ndarray) -> np.ndarray:
        d = self.state_dim
        x1, x2 = y[:, :d], y[:, d:2 * d]
        l1, l2 = y[:, 2 * d:4 * d], y[:, 4 * d:]
        u1 = self.control(l1[:, :d])
        u2 = self.control(l2[:, d:])
        f1 = self.dynamics(x1, u1)
        f2 = self.dynamics(x2, u2)
        a1 = self.dyn_jac(x1, u1)
        a2 = self.dyn_jac(x2, u2)
        xj = y[:, :2 * d]
        pg = self.penalty_grad(xj)

        def adj(lam, pgrad, own_slot):
            own = -np.einsum("bij,bi->bj", a1, lam[:, :d]) + pgrad[:, :d]
            oth = -np.einsum("bij,bi->bj", a2, lam[:, d:]) + pgrad[:, d:]
            if self.loss_x_grad is not None:
                if own_slot == 1:
                    own = own + self.loss_x_grad(x1)
                else:
                    oth = oth + self.loss_x_grad(x2)
            return np.concatenate([own, oth], axis=1)

        return np.concatenate([f1, f2, adj(l1, pg, 1), adj(l2, pg, 2)], axis=1)

    def terminal_costate(self, x_joint: np.ndarray) -> np.ndarray:
        """PMP costates at the horizon: negated terminal-loss gradients."""
        d = self.state_dim
        x1, x2 = x_joint[:, :d], x_joint[:, d:]
        z = np.zeros_like(x1)
        lam1 = np.concatenate([-self.terminal_grad(x1, 1), z], axis=1)
        lam2 = np.concatenate([z, -self.terminal_grad(x2, 2)], axis=1)
        return np.concatenate([lam1, lam2], axis=1)

    def running_cost(self, xj: np.ndarray, u: np.ndarray, slot: int) -> np.ndarray:
        d = self.state_dim
        w = self.loss_u(u) + self.penalty(xj)
        if self.loss_x is not None:
            w = w + self.loss_x(xj[:, :d] if slot == 1 else xj[:, d:])
        return w


def _fast_rhs(spec: games.GameSpec, tp: games.TypePair, penalty_scale: float):
    """Hand-fused augmented RHS for the case studies (hot path of shooting)."""
    d = spec.state_dim
    sep_a, sep_b = games.separation_matrix(spec)
    sep_at = sep_a.T.copy()
    eta = games.collision_threshold(spec, tp)
    gam = spec.penalty_shape
    bscale = float(penalty_scale)
    lo, hi = spec.control_lo, spec.control_hi
    unicycle = spec.case_id in ("narrow_road", "lane_change")
    inv2k = 1.0 / (2.0 * spec.turn_weight)
    g0 = games.GRAVITY

    def penalty_grad(y):
        sep = y[:, :2 * d] @ sep_at + sep_b
        s = np.sqrt(np.sum(sep * sep, axis=1))
        sig = 1.0 / (1.0 + np.exp(np.minimum(np.maximum(gam * (s - eta), -500.0), 500.0)))
        coef = np.where(s > 0.0, -bscale * gam * sig * (1.0 - sig)
                        / np.where(s > 0.0, s, 1.0), 0.0)
        return (coef[:, None] * sep) @ sep_a

    if unicycle:
        def rhs(y):
            out = np.empty_like(y)
            psi1, v1 = y[:, 2], y[:, 3]
            psi2, v2 = y[:, 6], y[:, 7]
            c1, s1 = np.cos(psi1), np.sin(psi1)
            c2, s2 = np.cos(psi2), np.sin(psi2)
            out[:, 0] = v1 * c1
            out[:, 1] = v1 * s1
            out[:, 2] = np.minimum(np.maximum(y[:, 10] * inv2k, lo[0]), hi[0])
            out[:, 3] = np.minimum(np.maximum(y[:, 11] * 0.5, lo[1]), hi[1])
            out[:, 4] = v2 * c2
            out[:, 5] = v2 * s2
            out[:, 6] = np.minimum(np.maximum(y[:, 22] * inv2k, lo[0]), hi[0])
            out[:, 7] = np.minimum(np.maximum(y[:, 23] * 0.5, lo[1]), hi[1])
            pg = penalty_grad(y)
            for base in (8, 16):
                lam = y[:, base:base + 8]
                out[:, base + 0] = pg[:, 0]
                out[:, base + 1] = pg[:, 1]
                out[:, base + 2] = v1 * (s1 * lam[:, 0] - c1 * lam[:, 1]) + pg[:, 2]
                out[:, base + 3] = -(c1 * lam[:, 0] + s1 * lam[:, 1]) + pg[:, 3]
                out[:, base + 4] = pg[:, 4]
                out[:, base + 5] = pg[:, 5]
                out[:, base + 6] = v2 * (s2 * lam[:, 4] - c2 * lam[:, 5]) + pg[:, 6]
                out[:, base + 7] = -(c2 * lam[:, 4] + s2 * lam[:, 5]) + pg[:, 7]
            return out
    else:
        def rhs(y):
            out = np.empty_like(y)
            out[:, 0:3] = y[:, 3:6]
            out[:, 3] = g0 * np.tan(np.minimum(np.maximum(np.arctan(y[:, 15] * g0 * inv2k), lo[0]), hi[0]))
            out[:, 4] = -g0 * np.tan(np.minimum(np.maximum(np.arctan(-y[:, 16] * g0 * inv2k), lo[1]), hi[1]))
            out[:, 5] = np.minimum(np.maximum(g0 + y[:, 17] * 0.5, lo[2]), hi[2]) - g0
            out[:, 6:9] = y[:, 9:12]
            out[:, 9] = g0 * np.tan(np.minimum(np.maximum(np.arctan(y[:, 33] * g0 * inv2k), lo[0]), hi[0]))
            out[:, 10] = -g0 * np.tan(np.minimum(np.maximum(np.arctan(-y[:, 34] * g0 * inv2k), lo[1]), hi[1]))
            out[:, 11] = np.minimum(np.maximum(g0 + y[:, 35] * 0.5, lo[2]), hi[2]) - g0
            pg = penalty_grad(y)
            for base in (12, 24):
                lam = y[:, base:base + 12]
                out[:, base + 0:base + 3] = pg[:, 0:3]
                out[:, base + 3:base + 6] = -lam[:, 0:3] + pg[:, 3:6]
                out[:, base + 6:base + 9] = pg[:, 6:9]
                out[:, base + 9:base + 12] = -lam[:, 6:9] + pg[:, 9:12]
            return out
    return rhs


def make_problem(spec: games.GameSpec, tp: games.TypePair,
                 penalty_scale: float | None = None) -> PmpProblem:
    """Bind a case study and type pair into a PmpProblem."""
    b = float(spec.penalty_scale if penalty_scale is None else penalty_scale)
    pspec = spec if penalty_scale is None else dataclasses.replace(
        spec, penalty_scale=b)
    return PmpProblem(
        state_dim=spec.state_dim,
        dynamics=lambda x, u: games.dynamics(spec, x, u),
        dyn_jac=lambda x, u: games.dynamics_jacobian(spec, x, u),
        control=lambda lam: games.hamiltonian_maximizer(spec, lam),
        loss_u=lambda u: games.instantaneous_loss(spec, u),
        penalty=lambda xj: games.state_penalty(pspec, tp, xj),
        penalty_grad=lambda xj: games.state_penalty_gradient(pspec, tp, xj),
        terminal_value=lambda x, slot: games.terminal_loss(spec, x, slot),
        terminal_grad=lambda x, slot: games.terminal_loss_gradient(spec, x, slot),
        rhs_fast=_fast_rhs(spec, tp, b),
    )


def assemble_pmp_rhs(spec: games.GameSpec, tp: games.TypePair):
    """(t, augmented_state) -> derivative, for a single flat augmented state."""
    problem = make_problem(spec, tp)

    def rhs(t, y):
        out = problem.rhs(np.asarray(y, dtype=float)[None, :])[0]
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite PMP derivative")
        return out

    return rhs


# --- multiple shooting -------------------------------------------------------

class SolveFailure(NumericalError):
    """BVP solve did not converge; diagnostics attached."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def _zero_costate_nodes(problem: PmpProblem, x0: np.ndarray,
                        nodes_t: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """States rolled forward under the zero-costate controls, costates zeroed."""
    d = problem.state_dim
    u0 = problem.control(np.zeros((1, d)))

    def state_rhs(xs):
        u = np.broadcast_to(u0, (xs.shape[0], u0.shape[1]))
        return np.concatenate([problem.dynamics(xs[:, :d], u),
                               problem.dynamics(xs[:, d:], u)], axis=1)

    path = rk.integrate_path(state_rhs, x0[None, :], nodes_t,
                             rtol=cfg.rtol, atol=cfg.atol)[:, 0, :]
    nodes = np.zeros((nodes_t.size, problem.aug_dim))
    nodes[:, :2 * d] = path
    return nodes


def _segment_ends(problem, nodes, h_seg, rtol, atol):
    """Propagate all segment starts over one segment span as a single batch."""
    return rk.integrate(problem.rhs, nodes, 0.0, h_seg, rtol=rtol, atol=atol)


def _residual_from_ends(problem, nodes, ends):
    parts = [ends[j] - nodes[j + 1] for j in range(len(nodes) - 1)]
    yT = ends[-1][None, :]
    d = problem.state_dim
    parts.append(yT[0, 2 * d:] - problem.terminal_costate(yT[:, :2 * d])[0])
    return np.concatenate(parts)


def _terminal_rows(problem, ends_batch):
    d = problem.state_dim
    return ends_batch[:, 2 * d:] - problem.terminal_costate(ends_batch[:, :2 * d])


def _newton_solve(problem: PmpProblem, nodes_t: np.ndarray, nodes: np.ndarray,
                  cfg: SolverConfig, rtol: float, atol: float):
    """Damped Newton on the multiple-shooting residual. Returns (nodes, info)."""
    n_seg = nodes_t.size - 1
    m = problem.aug_dim
    d = problem.state_dim
    h_seg = float(nodes_t[1] - nodes_t[0])
    free0 = np.arange(4 * d) + 2 * d          # node 0: only costates are unknown
    n_unknown = 4 * d + (n_seg - 1) * m

    def pack(nodes):
        return np.concatenate([nodes[0][2 * d:]] + [nodes[j] for j in range(1, n_seg)])

    def unpack(z, x0):
        nodes = np.empty((n_seg, m))
        nodes[0, :2 * d] = x0
        nodes[0, 2 * d:] = z[:4 * d]
        for j in range(1, n_seg):
            nodes[j] = z[4 * d + (j - 1) * m: 4 * d + j * m]
        return nodes

    x0 = nodes[0, :2 * d].copy()
    z = pack(nodes[:n_seg])

    def residual(z):
        nds = unpack(z, x0)
        ends = _segment_ends(problem, nds, h_seg, rtol, atol)
        if not np.all(np.isfinite(ends)):
            return None, None
        parts = [ends[j] - nds[j + 1] for j in range(n_seg - 1)]
        parts.append(_terminal_rows(problem, ends[-1:])[0])
        return np.concatenate(parts), nds

    r, nds = residual(z)
    if r is None:
        return None, {"reason": "non-finite warm start", "iters": 0}
    best = np.max(np.abs(r))
    info = {"iters": 0, "residual": best}
    for it in range(cfg.max_newton_iters):
        if best <= cfg.tol:
            info.update(residual=best, converged=True)
            return unpack(z, x0), info
        # assemble the FD Jacobian: one shared-step batch of every perturbation
        rows = [nds[j] for j in range(n_seg)]
        col_owner = []
        steps = []
        for j in range(n_seg):
            dims = free0 if j == 0 else np.arange(m)
            for k in dims:
                p = nds[j].copy()
                hk = cfg.fd_step * max(1.0, abs(p[k]))
                p[k] += hk
                rows.append(p)
                col_owner.append((j, k))
                steps.append(hk)
        batch = np.array(rows)
        ends = _segment_ends(problem, batch, h_seg, rtol, atol)
        if not np.all(np.isfinite(ends)):
            return None, {"reason": "non-finite Jacobian pass", "iters": it,
                          "residual": best}
        base_ends = ends[:n_seg]
        pert_ends = ends[n_seg:]
        base_term = _terminal_rows(problem, base_ends[-1:])[0]
        jac = np.zeros((n_unknown, n_unknown))
        # -I continuity blocks for node j+1 unknowns
        for j in range(n_seg - 1):
            row0 = j * m
            col0 = 4 * d + j * m
            jac[row0:row0 + m, col0:col0 + m] = -np.eye(m)
        for col, ((j, k), hk) in enumerate(zip(col_owner, steps)):
            e = pert_ends[col]
            if j < n_seg - 1:
                dr = (e - base_ends[j]) / hk
                jac_rows = slice(j * m, (j + 1) * m)
            else:
                dr = (_terminal_rows(problem, e[None, :])[0] - base_term) / hk
                jac_rows = slice((n_seg - 1) * m, (n_seg - 1) * m + 4 * d)
            zcol = (k - 2 * d) if j == 0 else 4 * d + (j - 1) * m + k
            jac[jac_rows, zcol] = dr
        try:
            dz = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            return None, {"reason": "singular shooting Jacobian", "iters": it,
                          "residual": best}
        # Armijo damping on the residual 2-norm
        rnorm = np.linalg.norm(r)
        alpha = 1.0
        accepted = False
        while alpha >= 2 ** -16:
            r_new, nds_new = residual(z + alpha * dz)
            if r_new is not None and np.linalg.norm(r_new) <= (1 - 1e-4 * alpha) * rnorm:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # Levenberg-Marquardt rescue: pure Newton stalls near folds of the
            # penalty continuation; a regularized least-squares step usually
            # still reduces the residual
            jtj = jac.T @ jac
            jtr = jac.T @ r
            mu0 = np.trace(jtj) / n_unknown
            for mu in (1e-8, 1e-6, 1e-4, 1e-2, 1.0):
                try:
                    dz_lm = np.linalg.solve(jtj + mu * mu0 * np.eye(n_unknown), -jtr)
                except np.linalg.LinAlgError:
                    continue
                r_new, nds_new = residual(z + dz_lm)
                if r_new is not None and np.linalg.norm(r_new) < rnorm:
                    dz = dz_lm
                    alpha = 1.0
                    accepted = True
                    break
        if not accepted:
            return None, {"reason": "line search stalled", "iters": it,
                          "residual": best}
        z = z + alpha * dz
        r, nds = r_new, nds_new
        best = np.max(np.abs(r))
        info["iters"] = it + 1
        info["residual"] = best
    if best <= cfg.tol:
        info["converged"] = True
        return unpack(z, x0), info
    info["reason"] = "newton iteration cap"
    return None, info


# --- continuation ladders ----------------------------------------------------

def _interp_nodes(old_t, old_nodes, new_t):
    """Per-dimension linear interpolation of node values onto a new node grid."""
    out = np.empty((new_t.size, old_nodes.shape[1]))
    for k in range(old_nodes.shape[1]):
        out[:, k] = np.interp(new_t, old_t, old_nodes[:, k])
    return out


def _horizon_climb(problem, x0, t0, horizon, cfg, stages, rtol, atol):
    """Grow the solved window backward from the terminal time toward t0."""
    prev = None
    for frac in np.linspace(1.0 / stages, 1.0, stages):
        t_start = horizon - frac * (horizon - t0)
        nodes_t = np.linspace(t_start, horizon, cfg.segments + 1)
        if prev is None:
            nodes = _zero_costate_nodes(problem, x0, nodes_t, cfg)
        else:
            prev_t, prev_nodes = prev
            nodes = _interp_nodes(prev_t, prev_nodes, nodes_t)
            nodes[0, :2 * problem.state_dim] = x0
        solved, info = _newton_solve(problem, nodes_t, nodes, cfg, rtol, atol)
        if solved is None:
            return None, dict(info, stage=f"horizon {frac:.3f}")
        full = np.vstack([solved, _segment_ends(problem, solved[-1:], float(
            nodes_t[1] - nodes_t[0]), rtol, atol)])
        prev = (nodes_t, full)
    return prev[1][:-1], {"converged": True}


def solve_problem(problem_for_scale, scales, x0, t0, horizon, cfg: SolverConfig):
    """Generic entry: penalty continuation with per-stage fallbacks.

    A failing stage first tries log-midpoint insertions between the last
    converged scale and the failing one, then horizon climbs with escalating
    stage counts (max_restarts of them). Successful stages are never
    re-solved. Returns (node_values, nodes_t, diagnostics); raises
    SolveFailure when a stage exhausts every fallback.
    """
    nodes_t = np.linspace(t0, horizon, cfg.segments + 1)
    pending = [float(b) for b in scales]
    final_scale = pending[-1]
    nodes = None
    prev_scale = None
    bisections = 0
    history = []
    diagnostics = {"attempts": [{"history": history}]}
    while pending:
        b = pending[0]
        final = b == final_scale
        rtol = cfg.rtol if final else max(cfg.rtol, cfg.coarse_rtol)
        atol = cfg.atol if final else max(cfg.atol, cfg.coarse_rtol)
        problem = problem_for_scale(b)
        if nodes is None:
            nodes = _zero_costate_nodes(problem, x0, nodes_t, cfg)
        solved, info = _newton_solve(problem, nodes_t, nodes, cfg, rtol, atol)
        if solved is None and prev_scale is not None and prev_scale > 0 \
                and b > 1.3 * prev_scale and bisections < 4:
            bisections += 1
            pending.insert(0, float(np.sqrt(prev_scale * b)))
            history.append({"penalty_scale": b, "fallback": "bisect", **info})
            continue
        if solved is None:
            for i in range(cfg.max_restarts):
                stages = cfg.horizon_stages * (i + 1)
                solved, info = _horizon_climb(problem, x0, t0, horizon, cfg,
                                              stages, rtol, atol)
                history.append({"penalty_scale": b, "fallback": f"horizon {stages}",
                                **info})
                if solved is not None:
                    break
        else:
            history.append({"penalty_scale": b, **info})
        if solved is None:
            raise SolveFailure(
                f"BVP stage at penalty scale {b:g} failed after all fallbacks",
                diagnostics)
        nodes = solved
        prev_scale = b
        pending.pop(0)
    # polish with a tighter integrator so emitted boundary residuals hold at
    # cfg.tol on the re-integrated path
    problem = problem_for_scale(final_scale)
    polish_cfg = dataclasses.replace(cfg, max_newton_iters=4)
    polished, info = _newton_solve(problem, nodes_t, nodes, polish_cfg,
                                   cfg.polish_rtol, cfg.polish_rtol)
    if polished is not None:
        diagnostics["polish"] = info
        return polished, nodes_t, diagnostics
    diagnostics["polish_failed"] = info
    return nodes, nodes_t, diagnostics


# --- trajectories ------------------------------------------------------------

@dataclasses.dataclass
class Trajectory:
    """One solved equilibrium path on the uniform 0.1 s grid.

    `costates` follow the stored convention: gradients of the accumulated
    cost-to-go w.r.t. the joint state in physical order (player 1 block
    first). Negate a costate's own block before calling the Hamiltonian
    maximizer. `values` are cost-to-go, so values[:, -1] equals the terminal
    loss.
    """

    times: np.ndarray                 # (K,)
    states: np.ndarray                # (K, 2d) physical order
    controls: np.ndarray              # (2, K, control_dim)
    costates: np.ndarray              # (2, K, 2d) value-gradient convention
    values: np.ndarray                # (2, K) cost-to-go
    type_pair: games.TypePair
    converged: bool
    solver_residual: float

    @property
    def n_nodes(self) -> int:
        return self.times.size


def _grid_times(t0: float, horizon: float, dt: float) -> np.ndarray:
    n = int(round((horizon - t0) / dt)) + 1
    return np.linspace(t0, horizon, n)


def _assemble_trajectory(problem, dt_grid, tp, nodes, nodes_t, cfg, residual) -> Trajectory:
    d = problem.state_dim
    times = _grid_times(float(nodes_t[0]), float(nodes_t[-1]), dt_grid)
    aug = np.empty((times.size, problem.aug_dim))
    rtol = atol = cfg.polish_rtol
    aug[0] = nodes[0]
    for j in range(nodes_t.size - 1):
        lo, hi = nodes_t[j], nodes_t[j + 1]
        # half-open (lo, hi]: grid times landing on an interior shooting node
        # are produced by the segment that ends there
        mask = (times > lo + 1e-9) & (times <= hi + 1e-9)
        seg_times = np.concatenate([[lo], times[mask]])
        if seg_times.size > 1:
            path = rk.integrate_path(problem.rhs, nodes[j][None, :], seg_times,
                                     rtol=rtol, atol=atol)[:, 0, :]
            aug[mask] = path[1:]
    states = aug[:, :2 * d]
    lam_pmp = np.stack([aug[:, 2 * d:4 * d], aug[:, 4 * d:]])
    controls = np.stack([problem.control(lam_pmp[0][:, :d]),
                         problem.control(lam_pmp[1][:, d:])])
    values = _accumulate_values(problem, aug, times, cfg)
    return Trajectory(times=times, states=states, controls=controls,
                      costates=-lam_pmp, values=values, type_pair=tp,
                      converged=True, solver_residual=float(residual))


def _accumulate_values(problem, aug, times, cfg, substeps: int = 10):
    """Backward-accumulated cost-to-go at the grid nodes.

    Each 0.1 s interval's running-cost integral is quadratured on a substep
    grid (the collision penalty can spike inside one interval), integrating
    every interval start as one shared-step batch.
    """
    d = problem.state_dim
    values = np.empty((2, times.size))
    for slot in (1, 2):
        xT = aug[-1, :d] if slot == 1 else aug[-1, d:2 * d]
        values[slot - 1, -1] = problem.terminal_value(xT, slot)
    if times.size == 1:
        return values
    dt = float(times[1] - times[0])
    sub = np.linspace(0.0, dt, substeps + 1)
    path = rk.integrate_path(problem.rhs, aug[:-1], sub,
                             rtol=cfg.rtol, atol=cfg.atol)
    for slot in (1, 2):
        base = 2 * d + (slot - 1) * 2 * d
        own = slice(base, base + d) if slot == 1 else slice(base + d, base + 2 * d)
        w = np.empty((substeps + 1, times.size - 1))
        for s in range(substeps + 1):
            u = problem.control(path[s][:, own])
            w[s] = problem.running_cost(path[s][:, :2 * d], u, slot)
        seg = np.trapezoid(w, dx=dt / substeps, axis=0)
        values[slot - 1, :-1] = values[slot - 1, -1] + np.cumsum(seg[::-1])[::-1]
    return values


def _penalty_scales(spec, cfg) -> list[float]:
    target = float(spec.penalty_scale)
    ladder = [b for b in cfg.penalty_ladder if b < target]
    return ladder + [target]


def solve_bvp(spec: games.GameSpec, tp: games.TypePair, x0: np.ndarray,
              t0: float = 0.0, cfg: SolverConfig | None = None) -> Trajectory:
    """Solve the coupled PMP system from a joint initial state at time t0.

    Raises SolveFailure with diagnostics when every continuation strategy
    diverges; an unconverged path is never returned.
    """
    cfg = cfg or SolverConfig()
    x0 = np.asarray(x0, dtype=float)
    if not (0.0 <= t0 <= spec.horizon + 1e-12):
        raise ValueError(f"t0={t0} outside [0, {spec.horizon}]")
    if abs(spec.horizon - t0) < 0.5 * spec.dt:
        return _degenerate_trajectory(spec, tp, x0)
    scales = _penalty_scales(spec, cfg)
    builder = lambda b: make_problem(spec, tp, penalty_scale=b)
    nodes, nodes_t, diag = solve_problem(builder, scales, x0, t0, spec.horizon, cfg)
    problem = builder(scales[-1])
    residual = diag.get("polish", diag["attempts"][-1]["history"][-1]).get(
        "residual", np.nan)
    return _assemble_trajectory(problem, spec.dt, tp, nodes, nodes_t, cfg, residual)


def _degenerate_trajectory(spec, tp, x0) -> Trajectory:
    d = spec.state_dim
    problem = make_problem(spec, tp)
    lam_pmp = problem.terminal_costate(x0[None, :])[0]
    lam = np.stack([lam_pmp[:2 * d][None, :], lam_pmp[2 * d:][None, :]])
    controls = np.stack([problem.control(lam[0][:, :d]),
                         problem.control(lam[1][:, d:])])
    values = np.array([[games.terminal_loss(spec, x0[:d], 1)],
                       [games.terminal_loss(spec, x0[d:], 2)]])
    return Trajectory(times=np.array([spec.horizon]), states=x0[None, :],
                      controls=controls, costates=-lam, values=values,
                      type_pair=tp, converged=True, solver_residual=0.0)


# --- dataset generation -------------------------------------------------------

SIGN_CONVENTION_NOTE = (
    "values are accumulated cost-to-go (terminal value equals the terminal "
    "loss); costate columns are gradients of that cost-to-go w.r.t. the "
    "ego-ordered joint state; negate a costate's own block before the "
    "Hamiltonian maximizer to recover controls"
)

SAMPLE_COLUMNS_DOC = "t, joint state (ego first), value, costate, theta_self, theta_other"


def trajectory_samples(traj: Trajectory, state_dim: int) -> dict[str, np.ndarray]:
    """Two ego-ordered supervised samples per trajectory node (one per player)."""
    d = state_dim
    k = traj.n_nodes
    t = np.tile(traj.times, 2)
    ego1 = traj.states
    ego2 = np.concatenate([traj.states[:, d:], traj.states[:, :d]], axis=1)
    co1 = traj.costates[0]
    co2 = np.concatenate([traj.costates[1][:, d:], traj.costates[1][:, :d]], axis=1)
    th = traj.type_pair.astuple()
    return {
        "t": t,
        "state": np.concatenate([ego1, ego2], axis=0),
        "value": np.concatenate([traj.values[0], traj.values[1]]),
        "costate": np.concatenate([co1, co2], axis=0),
        "theta_self": np.concatenate([np.full(k, th[0]), np.full(k, th[1])]),
        "theta_other": np.concatenate([np.full(k, th[1]), np.full(k, th[0])]),
    }


def sample_initial_state(spec: games.GameSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform joint initial state from the per-slot ground-truth boxes."""
    x1 = rng.uniform(spec.x_gt[0, :, 0], spec.x_gt[0, :, 1])
    x2 = rng.uniform(spec.x_gt[1, :, 0], spec.x_gt[1, :, 1])
    return np.concatenate([x1, x2])


def _solve_one(args):
    spec, tp, x0, t0, cfg = args
    try:
        return solve_bvp(spec, tp, x0, t0, cfg)
    except NumericalError as exc:
        return exc


def generate_dataset(spec: games.GameSpec, type_pairs, n_traj: int, seed: int,
                     cfg: SolverConfig | None = None, t0: float = 0.0,
                     workers: int = 1, progress=None):
    """Solve n_traj BVPs per type pair; emit trajectories and flat samples.

    Initial states are drawn uniformly from the ground-truth boxes; failed
    solves are logged and resampled (aborting when the failure fraction
    exceeds cfg.max_fail_fraction). Deterministic for a given seed and config
    regardless of worker count.
    """
    cfg = cfg or SolverConfig()
    trajectories: list[Trajectory] = []
    failures: list[dict] = []
    chunks: list[dict[str, np.ndarray]] = []
    for pair_index, tp in enumerate(type_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), pair_index]))
        accepted = attempts = 0
        while accepted < n_traj:
            batch = max(1, min(2 * workers, n_traj - accepted)) if workers > 1 else 1
            cands = [sample_initial_state(spec, rng) for _ in range(batch)]
            args = [(spec, tp, x0, t0, cfg) for x0 in cands]
            if workers > 1:
                import multiprocessing as mp
                with mp.Pool(workers) as pool:
                    results = pool.map(_solve_one, args)
            else:
                results = [_solve_one(a) for a in args]
            for x0, res in zip(cands, results):
                attempts += 1
                if isinstance(res, Trajectory):
                    if accepted < n_traj:
                        trajectories.append(res)
                        chunks.append(trajectory_samples(res, spec.state_dim))
                        accepted += 1
                        if progress:
                            progress(tp, accepted, attempts)
                else:
                    failures.append({"type_pair": tp.astuple(),
                                     "x0": np.asarray(x0).tolist(),
                                     "error": str(res)})
            if attempts >= max(20, 2 * n_traj):
                frac = (attempts - accepted) / attempts
                if frac > cfg.max_fail_fraction:
                    raise NumericalError(
                        f"BVP failure fraction {frac:.2f} exceeds "
                        f"{cfg.max_fail_fraction} for type pair {tp.astuple()} "
                        f"({accepted}/{attempts} accepted)")
    samples = {k: np.concatenate([c[k] for c in chunks], axis=0) for k in chunks[0]}
    return trajectories, samples, failures


# --- consistency diagnostics ---------------------------------------------------

def refine_augmented(spec: games.GameSpec, tp: games.TypePair, traj: Trajectory,
                     substeps: int = 50, rtol: float = 1e-9):
    """Fine-grid augmented path seeded at every stored node, one batched pass.

    Returns (times_fine, aug_fine) where aug rows are [joint state, both
    players' PMP costates].
    """
    problem = make_problem(spec, tp)
    if traj.n_nodes < 2:
        raise ValueError("cannot refine a single-node trajectory")
    dt = float(traj.times[1] - traj.times[0])
    starts = np.concatenate([
        traj.states[:-1],
        -traj.costates[0][:-1],
        -traj.costates[1][:-1],
    ], axis=1)
    sub = np.linspace(0.0, dt, substeps + 1)
    path = rk.integrate_path(problem.rhs, starts, sub, rtol=rtol, atol=rtol)
    n_int = starts.shape[0]
    times, rows = [], []
    for j in range(n_int):
        times.append(traj.times[j] + sub[:-1])
        rows.append(path[:-1, j, :])
    times.append(traj.times[-1:])
    rows.append(np.concatenate([traj.states[-1:], -traj.costates[0][-1:],
                                -traj.costates[1][-1:]], axis=1))
    return np.concatenate(times), np.concatenate(rows, axis=0)


def refine_path(spec: games.GameSpec, tp: games.TypePair, traj: Trajectory,
                substeps: int = 50, rtol: float = 1e-9):
    """Re-integrate a converged trajectory on a fine sub-grid of every interval.

    The collision penalty can be narrower in time than the 0.1 s storage grid,
    so verifying dV/dt = -(loss + penalty) needs sub-grid resolution.

    Returns (times_fine, values_fine (2, K), running_cost_fine (2, K)).
    """
    d = spec.state_dim
    problem = make_problem(spec, tp)
    t_fine, aug = refine_augmented(spec, tp, traj, substeps=substeps, rtol=rtol)
    states = aug[:, :2 * d]
    w = np.empty((2, t_fine.size))
    v = np.empty((2, t_fine.size))
    for slot in (1, 2):
        lam = aug[:, 2 * d + (slot - 1) * 2 * d: 2 * d + slot * 2 * d]
        own = lam[:, :d] if slot == 1 else lam[:, d:]
        u = problem.control(own)
        w[slot - 1] = problem.running_cost(states, u, slot)
        xT = states[-1, :d] if slot == 1 else states[-1, d:]
        vi = np.empty(t_fine.size)
        vi[-1] = problem.terminal_value(xT, slot)
        dts = np.diff(t_fine)
        for k in range(t_fine.size - 2, -1, -1):
            vi[k] = vi[k + 1] + 0.5 * dts[k] * (w[slot - 1, k] + w[slot - 1, k + 1])
        v[slot - 1] = vi
    return t_fine, v, w


def hji_consistency_errors(spec, tp, traj: Trajectory, substeps: int = 50):
    """Relative mismatch of central-FD dV/dt against -(loss + penalty).

    Evaluated on the refined path; returns the per-node relative errors
    (2, K-2) with denominator max(1, |loss + penalty|).
    """
    t, v, w = refine_path(spec, tp, traj, substeps=substeps)
    dt = np.diff(t)
    fd = (v[:, 2:] - v[:, :-2]) / (dt[1:] + dt[:-1])[None, :]
    return np.abs(fd + w[:, 1:-1]) / np.maximum(1.0, np.abs(w[:, 1:-1]))

