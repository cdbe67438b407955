"""Two-player collision-avoidance game models.

Three case studies share one structure: per-player nonlinear dynamics, a
quadratic control-effort running loss, a sigmoid state penalty keyed to a
type-dependent collision threshold, and a quadratic terminal loss. All model
functions are pure, broadcast over leading batch dimensions, and come with
hand-derived analytic gradients (the boundary-value solver evaluates them at
every integration step, so they cannot be numerical).

Joint states are length 2*state_dim vectors [own block, other block]. The
between-player distance is symmetric under swapping the blocks, so the same
formula serves either player's ego-first ordering.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigError, NumericalError

GRAVITY = 9.81

CASES = ("narrow_road", "lane_change", "drone")

THETA_MIN = 1.0
THETA_MAX = 5.0


@dataclasses.dataclass(frozen=True)
class TypePair:
    """Player-type pair, ego-first. Types are dimensionless scalars in [1, 5]."""

    theta_self: float
    theta_other: float

    def __post_init__(self):
        for th in (self.theta_self, self.theta_other):
            if not (THETA_MIN <= th <= THETA_MAX):
                raise ConfigError(f"player type {th} outside [{THETA_MIN}, {THETA_MAX}]")

    def swapped(self) -> "TypePair":
        return TypePair(self.theta_other, self.theta_self)

    def astuple(self) -> tuple[float, float]:
        return (self.theta_self, self.theta_other)


@dataclasses.dataclass(frozen=True, eq=False)
class GameSpec:
    """Constants of one case study. Defaults come from make_spec."""

    case_id: str
    state_dim: int
    control_dim: int
    horizon: float
    dt: float
    control_lo: np.ndarray
    control_hi: np.ndarray
    penalty_scale: float        # multiplier on the collision sigmoid
    penalty_shape: float        # sigmoid steepness
    turn_weight: float          # on omega^2 (unicycle) / tan^2 roll,pitch (drone)
    progress_weight: float      # linear forward-progress reward in the terminal loss
    nominal_speed: float
    lane_targets: tuple[float, float]   # terminal lateral target per player slot
    heading_weight: float       # terminal heading term (lane_change only)
    mirror_shift: np.ndarray    # coordinate shift in the distance function
    threshold_base: float
    x_gt: np.ndarray            # (2, state_dim, 2) per-slot sampling box, lo/hi
    x_hj: np.ndarray            # (2, state_dim, 2)

    @property
    def joint_dim(self) -> int:
        return 2 * self.state_dim

    @property
    def n_grid_nodes(self) -> int:
        return int(round(self.horizon / self.dt)) + 1


def _unicycle_boxes(gt, hj):
    return np.asarray(gt, dtype=float), np.asarray(hj, dtype=float)


def make_spec(case_id: str, overrides: dict | None = None) -> GameSpec:
    """Build a GameSpec for one of the case ids, with optional field overrides."""
    deg = math.pi / 180.0
    if case_id == "narrow_road":
        gt = [[[15, 20], [3.25, 4.75], [-deg, deg], [18, 25]]] * 2
        hj = [[[15, 95], [0, 8], [-0.2, 0.2], [18, 29]]] * 2
        x_gt, x_hj = _unicycle_boxes(gt, hj)
        fields = dict(
            case_id=case_id, state_dim=4, control_dim=2, horizon=3.0, dt=0.1,
            control_lo=np.array([-1.0, -5.0]), control_hi=np.array([1.0, 10.0]),
            penalty_scale=1e4, penalty_shape=5.0, turn_weight=100.0,
            progress_weight=1e-6, nominal_speed=18.0, lane_targets=(4.0, 4.0),
            heading_weight=0.0, mirror_shift=np.array([70.0]),
            threshold_base=1.25, x_gt=x_gt, x_hj=x_hj,
        )
    elif case_id == "lane_change":
        gt = [[[0, 3], [1.25, 2.75], [-deg, deg], [18, 25]],
              [[0, 3], [5.25, 6.75], [-deg, deg], [18, 25]]]
        hj = [[[0, 90], [0, 6], [-0.17, 0.15], [17, 26]],
              [[0, 90], [2, 8], [-0.15, 0.17], [17, 26]]]
        x_gt, x_hj = _unicycle_boxes(gt, hj)
        fields = dict(
            case_id=case_id, state_dim=4, control_dim=2, horizon=4.0, dt=0.1,
            control_lo=np.array([-1.0, -5.0]), control_hi=np.array([1.0, 10.0]),
            penalty_scale=1e4, penalty_shape=5.0, turn_weight=100.0,
            progress_weight=1e-6, nominal_speed=18.0, lane_targets=(6.0, 2.0),
            heading_weight=100.0, mirror_shift=np.array([0.0]),
            threshold_base=2.25, x_gt=x_gt, x_hj=x_hj,
        )
    elif case_id == "drone":
        gt = [[[0, 1], [0, 1], [-0.1, 0.1], [2, 4], [2, 4], [0, 0.1]]] * 2
        hj = [[[0, 15.5], [0, 15.5], [-2.2, 2.5], [0.3, 4.5], [0.3, 4.5], [-2, 2.2]]] * 2
        x_gt, x_hj = _unicycle_boxes(gt, hj)
        fields = dict(
            case_id=case_id, state_dim=6, control_dim=3, horizon=4.0, dt=0.1,
            control_lo=np.array([-0.05, -0.05, GRAVITY - 2.0]),
            control_hi=np.array([0.05, 0.05, GRAVITY + 2.0]),
            penalty_scale=1e4, penalty_shape=5.0, turn_weight=100.0,
            progress_weight=1e-6, nominal_speed=0.0, lane_targets=(0.0, 0.0),
            heading_weight=0.0, mirror_shift=np.array([5.0, 5.0]),
            threshold_base=0.5, x_gt=x_gt, x_hj=x_hj,
        )
    else:
        raise ConfigError(f"unknown case id {case_id!r}; expected one of {CASES}")
    if overrides:
        unknown = set(overrides) - set(fields)
        if unknown:
            raise ConfigError(f"unknown GameSpec override(s): {sorted(unknown)}")
        fields.update(overrides)
    return GameSpec(**fields)


# --- dynamics ---------------------------------------------------------------

def dynamics(spec: GameSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Single-player state derivative, shape (..., state_dim)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if spec.case_id in ("narrow_road", "lane_change"):
        v, psi = x[..., 3], x[..., 2]
        return np.stack([v * np.cos(psi), v * np.sin(psi), u[..., 0], u[..., 1]], axis=-1)
    if spec.case_id == "drone":
        return np.stack([
            x[..., 3], x[..., 4], x[..., 5],
            GRAVITY * np.tan(u[..., 0]),
            -GRAVITY * np.tan(u[..., 1]),
            u[..., 2] - GRAVITY,
        ], axis=-1)
    raise ConfigError(f"unknown case id {spec.case_id!r}")


def dynamics_jacobian(spec: GameSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """d(dynamics)/dx, shape (..., state_dim, state_dim)."""
    x = np.asarray(x, dtype=float)
    d = spec.state_dim
    jac = np.zeros(x.shape[:-1] + (d, d))
    if spec.case_id in ("narrow_road", "lane_change"):
        v, psi = x[..., 3], x[..., 2]
        jac[..., 0, 2] = -v * np.sin(psi)
        jac[..., 0, 3] = np.cos(psi)
        jac[..., 1, 2] = v * np.cos(psi)
        jac[..., 1, 3] = np.sin(psi)
    elif spec.case_id == "drone":
        jac[..., 0, 3] = 1.0
        jac[..., 1, 4] = 1.0
        jac[..., 2, 5] = 1.0
    else:
        raise ConfigError(f"unknown case id {spec.case_id!r}")
    return jac


# --- running loss -----------------------------------------------------------

def instantaneous_loss(spec: GameSpec, u: np.ndarray) -> np.ndarray:
    """Control-effort running loss; state-independent in every case."""
    u = np.asarray(u, dtype=float)
    if spec.case_id in ("narrow_road", "lane_change"):
        return spec.turn_weight * u[..., 0] ** 2 + u[..., 1] ** 2
    if spec.case_id == "drone":
        return (spec.turn_weight * np.tan(u[..., 0]) ** 2
                + spec.turn_weight * np.tan(u[..., 1]) ** 2
                + (u[..., 2] - GRAVITY) ** 2)
    raise ConfigError(f"unknown case id {spec.case_id!r}")


# --- distance, threshold, penalty -------------------------------------------

def separation_matrix(spec: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    """Affine map (A, b0) from the joint state to separation coordinates.

    The between-player distance is the Euclidean norm of A @ xj + b0, which is
    what makes the penalty gradient a constant-matrix chain rule.
    """
    d = spec.joint_dim
    if spec.case_id == "narrow_road":
        a = np.zeros((2, d))
        a[0, 0] = -1.0; a[0, 4] = -1.0          # R - x_own - x_other
        a[1, 1] = -1.0; a[1, 5] = 1.0           # y_other - y_own
        b0 = np.array([spec.mirror_shift[0], 0.0])
    elif spec.case_id == "lane_change":
        a = np.zeros((2, d))
        a[0, 0] = -1.0; a[0, 4] = 1.0
        a[1, 1] = -1.0; a[1, 5] = 1.0
        b0 = np.zeros(2)
    elif spec.case_id == "drone":
        a = np.zeros((3, d))
        a[0, 0] = -1.0; a[0, 6] = -1.0
        a[1, 1] = -1.0; a[1, 7] = -1.0
        a[2, 2] = -1.0; a[2, 8] = 1.0
        b0 = np.array([spec.mirror_shift[0], spec.mirror_shift[1], 0.0])
    else:
        raise ConfigError(f"unknown case id {spec.case_id!r}")
    return a, b0


def separation(spec: GameSpec, xj: np.ndarray) -> np.ndarray:
    a, b0 = separation_matrix(spec)
    return np.asarray(xj, dtype=float) @ a.T + b0


def distance(spec: GameSpec, xj: np.ndarray) -> np.ndarray:
    """Between-player distance S, symmetric under swapping the player blocks."""
    sep = separation(spec, xj)
    return np.sqrt(np.sum(sep * sep, axis=-1))


def distance_gradient(spec: GameSpec, xj: np.ndarray) -> np.ndarray:
    """dS/d(joint state); zero at the (measure-zero) coincidence point S = 0."""
    a, b0 = separation_matrix(spec)
    sep = np.asarray(xj, dtype=float) @ a.T + b0
    s = np.sqrt(np.sum(sep * sep, axis=-1))
    safe = np.where(s > 0.0, s, 1.0)
    return (sep / safe[..., None]) @ a * (s > 0.0)[..., None]


def collision_threshold(spec: GameSpec, tp: TypePair) -> float:
    t1, t2 = tp.theta_self, tp.theta_other
    return 0.1 * (t1 + t2) + 0.05 * min(t1, t2) + spec.threshold_base


def _sigmoid(z):
    # clip keeps exp finite; saturation is exact in float64 beyond |z| ~ 40
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def state_penalty(spec: GameSpec, tp: TypePair, xj: np.ndarray) -> np.ndarray:
    """Sigmoid collision penalty; equals penalty_scale/2 exactly at S = eta."""
    eta = collision_threshold(spec, tp)
    s = distance(spec, xj)
    z = spec.penalty_shape * (eta - s)
    return spec.penalty_scale * _sigmoid(np.asarray(z, dtype=float))


def state_penalty_gradient(spec: GameSpec, tp: TypePair, xj: np.ndarray) -> np.ndarray:
    """d(state_penalty)/d(joint state), analytic chain rule through S."""
    eta = collision_threshold(spec, tp)
    s = distance(spec, xj)
    z = np.asarray(spec.penalty_shape * (eta - s), dtype=float)
    sig = _sigmoid(z)
    dc_ds = -spec.penalty_scale * spec.penalty_shape * sig * (1.0 - sig)
    return dc_ds[..., None] * distance_gradient(spec, xj)


def constraint_indicator(spec: GameSpec, tp: TypePair, xj: np.ndarray) -> np.ndarray:
    """1 where the joint state violates the constraint (S <= eta), else 0.

    The boundary is included so the violating set is the closed sublevel set
    through the penalty midpoint.
    """
    return (distance(spec, xj) <= collision_threshold(spec, tp)).astype(np.int64)


# --- terminal loss ----------------------------------------------------------

def _check_slot(slot: int):
    if slot not in (1, 2):
        raise ConfigError(f"player slot must be 1 or 2, got {slot}")


def terminal_loss(spec: GameSpec, x: np.ndarray, player_slot: int = 1) -> np.ndarray:
    """Terminal loss on a single-player state. Slot selects the lane target."""
    _check_slot(player_slot)
    x = np.asarray(x, dtype=float)
    if spec.case_id == "narrow_road":
        return (-spec.progress_weight * x[..., 0]
                + (x[..., 3] - spec.nominal_speed) ** 2
                + (x[..., 1] - spec.lane_targets[player_slot - 1]) ** 2)
    if spec.case_id == "lane_change":
        return (-spec.progress_weight * x[..., 0]
                + (x[..., 1] - spec.lane_targets[player_slot - 1]) ** 2
                + (x[..., 3] - spec.nominal_speed) ** 2
                + spec.heading_weight * x[..., 2] ** 2)
    if spec.case_id == "drone":
        return (-spec.progress_weight * (x[..., 0] + x[..., 1])
                + x[..., 2] ** 2 + x[..., 3] ** 2 + x[..., 4] ** 2 + x[..., 5] ** 2)
    raise ConfigError(f"unknown case id {spec.case_id!r}")


def terminal_loss_gradient(spec: GameSpec, x: np.ndarray, player_slot: int = 1) -> np.ndarray:
    _check_slot(player_slot)
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    if spec.case_id == "narrow_road":
        grad[..., 0] = -spec.progress_weight
        grad[..., 1] = 2.0 * (x[..., 1] - spec.lane_targets[player_slot - 1])
        grad[..., 3] = 2.0 * (x[..., 3] - spec.nominal_speed)
    elif spec.case_id == "lane_change":
        grad[..., 0] = -spec.progress_weight
        grad[..., 1] = 2.0 * (x[..., 1] - spec.lane_targets[player_slot - 1])
        grad[..., 2] = 2.0 * spec.heading_weight * x[..., 2]
        grad[..., 3] = 2.0 * (x[..., 3] - spec.nominal_speed)
    elif spec.case_id == "drone":
        grad[..., 0] = -spec.progress_weight
        grad[..., 1] = -spec.progress_weight
        grad[..., 2:] = 2.0 * x[..., 2:]
    else:
        raise ConfigError(f"unknown case id {spec.case_id!r}")
    return grad


# --- closed-form Hamiltonian maximizer --------------------------------------

def hamiltonian_maximizer(spec: GameSpec, costate_self_block: np.ndarray) -> np.ndarray:
    """argmax_u {lam^T f - running loss} in closed form, clipped to bounds.

    Controls enter the dynamics affinely (through tan for the drone, monotone
    on its +-0.05 rad box, so clipping the atan stationary point is exact) and
    the loss is strictly concave in the maximized objective.
    """
    lam = np.asarray(costate_self_block, dtype=float)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite costate passed to hamiltonian_maximizer")
    lo, hi = spec.control_lo, spec.control_hi
    if spec.case_id in ("narrow_road", "lane_change"):
        om = np.clip(lam[..., 2] / (2.0 * spec.turn_weight), lo[0], hi[0])
        acc = np.clip(lam[..., 3] / 2.0, lo[1], hi[1])
        return np.stack([om, acc], axis=-1)
    if spec.case_id == "drone":
        roll = np.clip(np.arctan(lam[..., 3] * GRAVITY / (2.0 * spec.turn_weight)), lo[0], hi[0])
        pitch = np.clip(np.arctan(-lam[..., 4] * GRAVITY / (2.0 * spec.turn_weight)), lo[1], hi[1])
        thrust = np.clip(GRAVITY + lam[..., 5] / 2.0, lo[2], hi[2])
        return np.stack([roll, pitch, thrust], axis=-1)
    raise ConfigError(f"unknown case id {spec.case_id!r}")


def hamiltonian_control_objective(spec: GameSpec, costate_self_block: np.ndarray,
                                  u: np.ndarray) -> np.ndarray:
    """Control-dependent part of the maximized Hamiltonian, lam^T f_u - loss.

    State-velocity terms that do not involve u are dropped (they cancel when
    comparing candidate controls), as is the control-independent penalty.
    """
    lam = np.asarray(costate_self_block, dtype=float)
    u = np.asarray(u, dtype=float)
    if spec.case_id in ("narrow_road", "lane_change"):
        lin = lam[..., 2] * u[..., 0] + lam[..., 3] * u[..., 1]
    elif spec.case_id == "drone":
        lin = (lam[..., 3] * GRAVITY * np.tan(u[..., 0])
               - lam[..., 4] * GRAVITY * np.tan(u[..., 1])
               + lam[..., 5] * (u[..., 2] - GRAVITY))
    else:
        raise ConfigError(f"unknown case id {spec.case_id!r}")
    return lin - instantaneous_loss(spec, u)
