"""Closed-loop rollouts, collision detection, and the type-grid safety report.

A controller maps (joint states, time) to both players' controls. The
operator controller evaluates the trained network twice per step (once per
ego ordering), negates the value gradient's own block, and feeds it to the
closed-form Hamiltonian maximizer. Controls are held constant over each
integration step.

States leaving the normalizer's +-20% extrapolation guard band mark the
rollout as diverged; diverged rollouts count as unsafe in every rate, so
blow-ups cannot launder the collision statistics.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from . import games, pmp, rk
from . import neural_operator as nop
from .errors import ConfigError, NumericalError

GUARD_BAND = 0.2


@dataclasses.dataclass(frozen=True)
class RolloutConfig:
    dt: float = 0.1
    integrator: str = "rk4"           # "rk4" | "euler"
    n_test: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.integrator not in ("rk4", "euler"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")


@dataclasses.dataclass
class RolloutResult:
    times: np.ndarray                 # (K,)
    states: np.ndarray                # (B, K, 2d)
    collided: np.ndarray              # (B,) bool
    diverged: np.ndarray              # (B,) bool
    min_distance: np.ndarray          # (B,)

    @property
    def unsafe(self) -> np.ndarray:
        return self.collided | self.diverged


def operator_controller(op: nop.ValueOperator, spec: games.GameSpec,
                        tp: games.TypePair):
    """Closed-loop policy for both players from one trained operator."""
    d = spec.state_dim
    swap = np.concatenate([np.arange(d, 2 * d), np.arange(d)])
    bits_self = op.bits_for(spec, tp)
    bits_other = op.bits_for(spec, tp.swapped())

    def control(states: np.ndarray, t: float):
        b = states.shape[0]
        xt = np.concatenate([
            np.concatenate([states, np.full((b, 1), t)], axis=1),
            np.concatenate([states[:, swap], np.full((b, 1), t)], axis=1)], axis=0)
        xt_t = torch.from_numpy(op.normalizer.encode(xt)).requires_grad_(True)
        bits = torch.cat([bits_self.expand(b, -1), bits_other.expand(b, -1)])
        v = op(bits, xt_t)
        g = torch.autograd.grad(v.sum(), xt_t)[0].numpy()
        g = g * op.normalizer.grad_scale()[None, :]
        lam_own = -g[:, :d]           # ego order: own block first in both halves
        u = games.hamiltonian_maximizer(spec, lam_own)
        return u[:b], u[b:]

    return control


def costate_controller(traj: pmp.Trajectory, spec: games.GameSpec,
                       tp: games.TypePair | None = None, substeps: int = 1):
    """Stub controller replaying a solved trajectory's stored costates.

    Costates are linearly interpolated in time. With substeps > 1 the costate
    path is re-integrated on a sub-grid first (the costates bend sharply near
    the penalty wall, where the 0.1 s nodes under-resolve them).
    """
    d = spec.state_dim
    if substeps > 1:
        t_grid, aug = pmp.refine_augmented(spec, tp or traj.type_pair, traj,
                                           substeps=substeps)
        lam1_grid = aug[:, 2 * d:2 * d + d]
        lam2_grid = aug[:, 5 * d:6 * d]
    else:
        t_grid = traj.times
        lam1_grid = -traj.costates[0][:, :d]
        lam2_grid = -traj.costates[1][:, d:]

    def control(states: np.ndarray, t: float):
        tm = float(np.clip(t, t_grid[0], t_grid[-1]))
        lam1 = np.array([np.interp(tm, t_grid, lam1_grid[:, j]) for j in range(d)])
        lam2 = np.array([np.interp(tm, t_grid, lam2_grid[:, j]) for j in range(d)])
        b = states.shape[0]
        u1 = games.hamiltonian_maximizer(spec, np.repeat(lam1[None, :], b, axis=0))
        u2 = games.hamiltonian_maximizer(spec, np.repeat(lam2[None, :], b, axis=0))
        return u1, u2

    return control


def _guard_bounds(op_or_spec) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(op_or_spec, games.GameSpec):
        norm = nop.default_normalizer(op_or_spec)
    else:
        norm = op_or_spec.normalizer
    lo, hi = norm.lo[:-1], norm.hi[:-1]
    width = hi - lo
    return lo - GUARD_BAND * width, hi + GUARD_BAND * width


def closed_loop_rollout(controller, spec: games.GameSpec, tp: games.TypePair,
                        x0: np.ndarray, cfg: RolloutConfig,
                        guard: tuple[np.ndarray, np.ndarray] | None = None) -> RolloutResult:
    """Roll a batch of initial joint states to the horizon under a controller."""
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    b = x.shape[0]
    n_nodes = int(round(spec.horizon / cfg.dt)) + 1
    times = np.linspace(0.0, spec.horizon, n_nodes)
    eta = games.collision_threshold(spec, tp)
    lo_g, hi_g = guard if guard is not None else _guard_bounds(spec)
    states = np.empty((b, n_nodes, x.shape[1]))
    collided = np.zeros(b, dtype=bool)
    diverged = np.zeros(b, dtype=bool)
    min_dist = np.full(b, np.inf)
    d = spec.state_dim

    for k in range(n_nodes):
        states[:, k] = x
        dist = games.distance(spec, x)
        live = ~diverged
        min_dist[live] = np.minimum(min_dist[live], dist[live])
        collided |= live & (dist <= eta)
        out = (x < lo_g[None, :]) | (x > hi_g[None, :])
        diverged |= out.any(axis=1)
        if k == n_nodes - 1:
            break
        u1, u2 = controller(x, float(times[k]))
        if not (np.all(np.isfinite(u1)) and np.all(np.isfinite(u2))):
            raise NumericalError("controller produced non-finite controls")

        def rhs(xs):
            return np.concatenate([games.dynamics(spec, xs[:, :d], u1),
                                   games.dynamics(spec, xs[:, d:], u2)], axis=1)

        if cfg.integrator == "rk4":
            x_new = rk.rk4_step(rhs, x, cfg.dt)
        else:
            x_new = x + cfg.dt * rhs(x)
        x = np.where(diverged[:, None], x, x_new)
    return RolloutResult(times=times, states=states, collided=collided,
                         diverged=diverged, min_distance=min_dist)


# --- ground-truth test sets -----------------------------------------------------

def build_test_set(spec: games.GameSpec, tp: games.TypePair, n: int, seed: int,
                   solver_cfg: pmp.SolverConfig | None = None,
                   min_accept: float = 0.15):
    """Initial states whose equilibrium solutions are collision-free.

    Candidates are sampled uniformly from the ground-truth boxes; a candidate
    is kept only when its solved trajectory keeps the distance strictly above
    the threshold at every grid node. The same seed reproduces the same set,
    so every model is evaluated on identical initial states.
    """
    solver_cfg = solver_cfg or pmp.SolverConfig()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7e57]))
    eta = games.collision_threshold(spec, tp)
    kept: list[np.ndarray] = []
    attempts = 0
    rejected_unsafe = 0
    failures = 0
    while len(kept) < n:
        x0 = pmp.sample_initial_state(spec, rng)
        attempts += 1
        try:
            traj = pmp.solve_bvp(spec, tp, x0, cfg=solver_cfg)
            if games.distance(spec, traj.states).min() > eta:
                kept.append(x0)
            else:
                rejected_unsafe += 1
        except NumericalError:
            failures += 1
        if attempts >= max(20, int(np.ceil(n / min_accept))) and len(kept) < n:
            rate = len(kept) / attempts
            if rate < min_accept:
                raise NumericalError(
                    f"test-set acceptance rate {rate:.2f} below {min_accept} "
                    f"for {tp.astuple()}: {failures} solver failures, "
                    f"{rejected_unsafe} unsafe equilibria in {attempts} attempts")
    info = {"attempts": attempts, "solver_failures": failures,
            "rejected_unsafe": rejected_unsafe}
    return np.array(kept), info


# --- the type-grid safety report -------------------------------------------------

@dataclasses.dataclass
class EvalCell:
    model: str
    theta1: float
    theta2: float
    seen: bool
    n_gt: int
    n_pred: int

    @property
    def col_rate(self) -> float:
        return self.n_pred / self.n_gt


def evaluate_cells(models: dict[str, nop.ValueOperator], spec: games.GameSpec,
                   type_values, cfg: RolloutConfig,
                   solver_cfg: pmp.SolverConfig | None = None,
                   trained_pairs=((1, 1), (1, 5), (5, 1), (5, 5)),
                   test_sets: dict | None = None,
                   progress=None) -> list[EvalCell]:
    """Col.% over the full (theta1, theta2) grid for every model.

    Test sets are built per cell (the collision-free filter depends on the
    threshold) and shared across models. Pass `test_sets` to reuse
    previously built cells keyed by (theta1, theta2).
    """
    torch.set_num_threads(1)
    trained = {tuple(map(float, p)) for p in trained_pairs}
    cells: list[EvalCell] = []
    test_sets = {} if test_sets is None else test_sets
    for th1 in type_values:
        for th2 in type_values:
            tp = games.TypePair(float(th1), float(th2))
            key = tp.astuple()
            if key not in test_sets:
                test_sets[key], _ = build_test_set(
                    spec, tp, cfg.n_test, cfg.seed, solver_cfg)
            x0s = test_sets[key]
            for name, op in models.items():
                controller = operator_controller(op, spec, tp)
                result = closed_loop_rollout(controller, spec, tp, x0s, cfg,
                                             guard=_guard_bounds(op))
                cells.append(EvalCell(model=name, theta1=key[0], theta2=key[1],
                                      seen=key in trained, n_gt=len(x0s),
                                      n_pred=int(result.unsafe.sum())))
                if progress:
                    progress(cells[-1])
    return cells


def cells_to_rows(cells: list[EvalCell]) -> list[dict]:
    return [{"model": c.model, "theta1": c.theta1, "theta2": c.theta2,
             "seen_flag": int(c.seen), "n_gt": c.n_gt, "n_pred": c.n_pred,
             "col_rate": c.col_rate} for c in cells]


def cells_to_matrix(cells: list[EvalCell], model: str, type_values) -> np.ndarray:
    """Col.% matrix with theta1 on rows, theta2 on columns."""
    values = list(map(float, type_values))
    mat = np.full((len(values), len(values)), np.nan)
    for c in cells:
        if c.model == model:
            mat[values.index(c.theta1), values.index(c.theta2)] = c.col_rate
    return mat


def read_report_csv(path) -> list[EvalCell]:
    """Round-trip reader for the eval stage's report.csv."""
    import csv as _csv

    cells = []
    with open(path, newline="") as fh:
        for row in _csv.DictReader(fh):
            cells.append(EvalCell(model=row["model"], theta1=float(row["theta1"]),
                                  theta2=float(row["theta2"]),
                                  seen=bool(int(row["seen_flag"])),
                                  n_gt=int(row["n_gt"]), n_pred=int(row["n_pred"])))
    return cells
