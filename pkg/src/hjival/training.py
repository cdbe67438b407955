"""Hybrid (PDE-residual + supervised) and supervised-only operator training.

The PDE residual follows the stored cost-to-go convention: at a point (x, t)
the residual for a player is  d_t V + grad_x V . F(x, u*) + loss(u*) + penalty,
where that player's control u* comes from the Hamiltonian maximizer applied to
the negated own-block of grad_x V, and the opponent's control comes from the
opponent's own value gradient (evaluated by re-ordering the joint state ego
first). Gradients flow through the closed-form controls; at interior optima
the envelope theorem makes that consistent, and clipped controls contribute
zero sensitivity.

Loss terms are L1 exactly; each term is summed over the two players with a
per-player batch mean. Training is deterministic for a fixed seed: batching
randomness lives in one numpy generator, torch is used single-threaded with no
internal RNG consumption, and checkpoints serialize optimizer and generator
state in a fixed binary layout.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from pathlib import Path

import numpy as np
import torch

from . import games
from . import neural_operator as nop
from .errors import ConfigError, NumericalError

TRAINER_MAGIC = b"HJIVALTR\n"


@dataclasses.dataclass(frozen=True)
class LossWeights:
    c1: float = 100.0   # boundary residual
    c2: float = 100.0   # value error
    c3: float = 10.0    # costate error

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ConfigError("loss weights must be positive")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    mode: str = "hno"                 # "hno" | "sno"
    learning_rate: float = 2e-5
    batch_size: int = 256
    pretrain_iters: int = 100_000
    refine_iters: int = 200_000
    weights: LossWeights = LossWeights()
    activation: str = "tanh"
    q: int = 64
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ("hno", "sno"):
            raise ConfigError(f"mode must be 'hno' or 'sno', got {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def total_iters(self) -> int:
        return (self.pretrain_iters + self.refine_iters
                if self.mode == "hno" else self.refine_iters)


def curriculum_window(spec, iteration: int, cfg: TrainConfig) -> tuple[float, float]:
    """Expanding time window for PDE points, anchored at the terminal time."""
    r = iteration - cfg.pretrain_iters
    if r <= 0 or cfg.refine_iters == 0:
        return (spec.horizon, spec.horizon)
    frac = min(1.0, r / cfg.refine_iters)
    return (spec.horizon * (1.0 - frac), spec.horizon)


# --- torch mirrors of the game model (autograd path) --------------------------

def t_dynamics(spec, x, u):
    if spec.case_id in ("narrow_road", "lane_change"):
        v, psi = x[:, 3], x[:, 2]
        return torch.stack([v * torch.cos(psi), v * torch.sin(psi),
                            u[:, 0], u[:, 1]], dim=1)
    return torch.cat([x[:, 3:6], games.GRAVITY * torch.tan(u[:, 0:1]),
                      -games.GRAVITY * torch.tan(u[:, 1:2]),
                      u[:, 2:3] - games.GRAVITY], dim=1)


def t_instantaneous_loss(spec, u):
    if spec.case_id in ("narrow_road", "lane_change"):
        return spec.turn_weight * u[:, 0] ** 2 + u[:, 1] ** 2
    return (spec.turn_weight * torch.tan(u[:, 0]) ** 2
            + spec.turn_weight * torch.tan(u[:, 1]) ** 2
            + (u[:, 2] - games.GRAVITY) ** 2)


def t_maximizer(spec, lam_own):
    lo = torch.from_numpy(spec.control_lo)
    hi = torch.from_numpy(spec.control_hi)
    if spec.case_id in ("narrow_road", "lane_change"):
        om = torch.clamp(lam_own[:, 2] / (2.0 * spec.turn_weight), lo[0], hi[0])
        acc = torch.clamp(lam_own[:, 3] / 2.0, lo[1], hi[1])
        return torch.stack([om, acc], dim=1)
    g = games.GRAVITY
    roll = torch.clamp(torch.atan(lam_own[:, 3] * g / (2 * spec.turn_weight)), lo[0], hi[0])
    pitch = torch.clamp(torch.atan(-lam_own[:, 4] * g / (2 * spec.turn_weight)), lo[1], hi[1])
    thrust = torch.clamp(g + lam_own[:, 5] / 2.0, lo[2], hi[2])
    return torch.stack([roll, pitch, thrust], dim=1)


def t_state_penalty(spec, eta, xj):
    a, b0 = games.separation_matrix(spec)
    sep = xj @ torch.from_numpy(a.T.copy()) + torch.from_numpy(b0)
    s = torch.sqrt((sep * sep).sum(dim=1))
    z = torch.clamp(spec.penalty_shape * (eta - s), -500.0, 500.0)
    return spec.penalty_scale * torch.sigmoid(z)


def t_terminal_loss(spec, x, lane_target):
    if spec.case_id == "narrow_road":
        return (-spec.progress_weight * x[:, 0]
                + (x[:, 3] - spec.nominal_speed) ** 2 + (x[:, 1] - lane_target) ** 2)
    if spec.case_id == "lane_change":
        return (-spec.progress_weight * x[:, 0] + (x[:, 1] - lane_target) ** 2
                + (x[:, 3] - spec.nominal_speed) ** 2
                + spec.heading_weight * x[:, 2] ** 2)
    return (-spec.progress_weight * (x[:, 0] + x[:, 1])
            + (x[:, 2:] ** 2).sum(dim=1))


# --- datasets on the torch side -----------------------------------------------

def sample_pinn_pool(spec, type_pairs, n: int, seed: int) -> np.ndarray:
    """Uniform joint states over the per-player refinement boxes, typed rows.

    Returns (n, 2*state_dim + 2): state columns then theta1, theta2.
    """
    if n < 1:
        raise ConfigError("pool size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9d]))
    x1 = rng.uniform(spec.x_hj[0, :, 0], spec.x_hj[0, :, 1], size=(n, spec.state_dim))
    x2 = rng.uniform(spec.x_hj[1, :, 0], spec.x_hj[1, :, 1], size=(n, spec.state_dim))
    pairs = np.asarray([games.TypePair(*tp).astuple() if not isinstance(tp, games.TypePair)
                        else tp.astuple() for tp in type_pairs])
    which = rng.integers(0, len(pairs), size=n)
    return np.concatenate([x1, x2, pairs[which]], axis=1)


def sample_boundary_pool(spec, type_pairs, n: int, seed: int) -> np.ndarray:
    """States for terminal-condition residuals (time implicitly the horizon).

    The trainer reuses the PDE state pool for boundary batches, so this is the
    same distribution; it exists for callers that want an independent pool.
    """
    return sample_pinn_pool(spec, type_pairs, n, seed)


class _Prepared:
    """Tensors precomputed once per training run."""

    def __init__(self, spec, op: nop.ValueOperator, samples, pool):
        d = spec.state_dim
        self.spec = spec
        self.d = d
        self.swap = np.concatenate([np.arange(d, 2 * d), np.arange(d)])
        norm = op.normalizer
        self.scale = torch.from_numpy(norm.grad_scale())
        # supervised rows (already ego-ordered, one per player per node)
        xt = np.concatenate([samples["state"], samples["t"][:, None]], axis=1)
        self.sup_xt = torch.from_numpy(norm.encode(xt))
        self.sup_value = torch.from_numpy(samples["value"].copy())
        self.sup_costate = torch.from_numpy(samples["costate"].copy())
        pairs = np.stack([samples["theta_self"], samples["theta_other"]], axis=1)
        self.sup_bits_idx, self.bits_table = self._index_pairs(spec, op, pairs)
        self.n_sup = self.sup_xt.shape[0]
        # PDE pool rows (physical order + type columns)
        if pool is not None:
            states = pool[:, :2 * d]
            self.pool_states = torch.from_numpy(states.copy())
            self.pool_states_sw = torch.from_numpy(states[:, self.swap].copy())
            self.pool_norm = torch.from_numpy(
                norm.encode(np.concatenate([states, np.zeros((len(states), 1))],
                                           axis=1))[:, :2 * d])
            self.pool_norm_sw = torch.from_numpy(
                norm.encode(np.concatenate([states[:, self.swap],
                                            np.zeros((len(states), 1))], axis=1))[:, :2 * d])
            ppairs = pool[:, 2 * d:]
            idx, self.bits_table = self._index_pairs(spec, op, ppairs, self.bits_table)
            self.pool_bits_idx = idx
            eta = np.array([games.collision_threshold(spec, games.TypePair(*p))
                            for p in ppairs])
            self.pool_eta = torch.from_numpy(eta)
            g1 = games.terminal_loss(spec, states[:, :d], 1)
            g2 = games.terminal_loss(spec, states[:, d:], 2)
            self.pool_terminal = torch.from_numpy(np.stack([g1, g2], axis=0))
            self.n_pool = states.shape[0]
        else:
            self.n_pool = 0
        self.t_lo_norm, self.t_hi_norm = None, None
        self.norm_lo_t = float(norm.lo[-1])
        self.norm_hi_t = float(norm.hi[-1])

    def _index_pairs(self, spec, op, pairs, table=None):
        table = table if table is not None else {}
        idx = np.empty(len(pairs), dtype=np.int64)
        rows = {key: i for i, key in enumerate(table)}
        for i, p in enumerate(pairs):
            key = (float(p[0]), float(p[1]))
            if key not in rows:
                rows[key] = len(rows)
                table[key] = nop.build_branch_input(spec, games.TypePair(*key),
                                                    op.lattice)
            idx[i] = rows[key]
        return torch.from_numpy(idx), table

    def bits_tensor(self):
        return torch.from_numpy(np.stack(list(self.bits_table.values())))

    def encode_t(self, t):
        return 2.0 * (t - self.norm_lo_t) / (self.norm_hi_t - self.norm_lo_t) - 1.0


def supervised_terms(op, prep: _Prepared, idx: torch.Tensor, bits_all):
    """Per-player-summed mean L1 value and costate errors on supervised rows."""
    xt = prep.sup_xt[idx].clone().requires_grad_(True)
    bits = bits_all[prep.sup_bits_idx[idx]]
    v = op(bits, xt)
    g = torch.autograd.grad(v.sum(), xt, create_graph=True)[0]
    gx = g[:, :-1] * prep.scale[:-1]
    value_term = 2.0 * (v - prep.sup_value[idx]).abs().mean()
    costate_term = 2.0 * (gx - prep.sup_costate[idx]).abs().sum(dim=1).mean()
    return value_term, costate_term


def hji_residual(op, prep: _Prepared, idx: torch.Tensor, t: torch.Tensor, bits_all):
    """Both players' PDE residuals at pool states with the given times."""
    spec, d = prep.spec, prep.d
    n = idx.shape[0]
    t_norm = prep.encode_t(t)
    xt = torch.cat([
        torch.cat([prep.pool_norm[idx], t_norm[:, None]], dim=1),
        torch.cat([prep.pool_norm_sw[idx], t_norm[:, None]], dim=1)], dim=0)
    xt = xt.requires_grad_(True)
    bits = bits_all[prep.pool_bits_idx[idx]].repeat(2, 1)
    v = op(bits, xt)
    g = torch.autograd.grad(v.sum(), xt, create_graph=True)[0] * prep.scale
    gx, gt = g[:, :-1], g[:, -1]
    u_own = t_maximizer(spec, -gx[:, :d])
    u_other = torch.cat([u_own[n:], u_own[:n]], dim=0)
    ego_states = torch.cat([prep.pool_states[idx], prep.pool_states_sw[idx]], dim=0)
    f = torch.cat([t_dynamics(spec, ego_states[:, :d], u_own),
                   t_dynamics(spec, ego_states[:, d:], u_other)], dim=1)
    eta = prep.pool_eta[idx].repeat(2)
    run = t_instantaneous_loss(spec, u_own) + t_state_penalty(spec, eta, ego_states)
    return gt + (gx * f).sum(dim=1) + run


def boundary_residual(op, prep: _Prepared, idx: torch.Tensor, bits_all):
    """Terminal-condition residual at pool states for both players."""
    n = idx.shape[0]
    t_norm = torch.ones((2 * n, 1), dtype=torch.float64)  # t = horizon maps to +1
    xt = torch.cat([torch.cat([prep.pool_norm[idx], t_norm[:n]], dim=1),
                    torch.cat([prep.pool_norm_sw[idx], t_norm[n:]], dim=1)], dim=0)
    bits = bits_all[prep.pool_bits_idx[idx]].repeat(2, 1)
    v = op(bits, xt)
    target = torch.cat([prep.pool_terminal[0][idx], prep.pool_terminal[1][idx]])
    return v - target


def hno_loss(op, prep: _Prepared, batches: dict, weights: LossWeights,
             mode: str):
    """Weighted L1 loss; returns (scalar, per-term breakdown)."""
    bits_all = prep.bits_tensor()
    value_term, costate_term = supervised_terms(op, prep, batches["sup"], bits_all)
    terms = {"value": float(value_term.detach()), "costate": float(costate_term.detach())}
    loss = weights.c2 * value_term + weights.c3 * costate_term
    if mode == "hno" and batches.get("pde") is not None:
        idx, t = batches["pde"]
        res = hji_residual(op, prep, idx, t, bits_all)
        pde_term = 2.0 * res.abs().mean()
        bres = boundary_residual(op, prep, batches["boundary"], bits_all)
        bnd_term = 2.0 * bres.abs().mean()
        loss = loss + pde_term + weights.c1 * bnd_term
        terms.update(pde=float(pde_term.detach()), boundary=float(bnd_term.detach()))
    terms["total"] = float(loss.detach())
    return loss, terms


# --- trainer state (resumable, byte-stable) ------------------------------------

def _save_trainer_state(path, iteration, optimizer, rng):
    blocks = []
    adam = []
    for group_idx, group in enumerate(optimizer.param_groups):
        for p_idx, p in enumerate(group["params"]):
            st = optimizer.state.get(p, {})
            if not st:
                adam.append(None)
                continue
            adam.append({"step": float(st["step"]),
                         "shape": list(p.shape)})
            blocks.append(np.ascontiguousarray(
                st["exp_avg"].detach().numpy(), dtype="<f8"))
            blocks.append(np.ascontiguousarray(
                st["exp_avg_sq"].detach().numpy(), dtype="<f8"))
    header = {"iteration": int(iteration), "adam": adam,
              "rng_state": rng.bit_generator.state}
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(TRAINER_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for b in blocks:
            fh.write(b.tobytes())
    tmp.replace(Path(path))


def _load_trainer_state(path, optimizer, rng):
    data = Path(path).read_bytes()
    if not data.startswith(TRAINER_MAGIC):
        raise NumericalError(f"{path} is not a trainer state file")
    off = len(TRAINER_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off:off + 8])
    header = json.loads(data[off + 8:off + 8 + hlen])
    cursor = off + 8 + hlen
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for p, meta in zip(params, header["adam"]):
        if meta is None:
            continue
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        exp_avg = np.frombuffer(data[cursor:cursor + 8 * n], dtype="<f8").reshape(meta["shape"])
        cursor += 8 * n
        exp_sq = np.frombuffer(data[cursor:cursor + 8 * n], dtype="<f8").reshape(meta["shape"])
        cursor += 8 * n
        optimizer.state[p] = {
            "step": torch.tensor(meta["step"], dtype=torch.float32),
            "exp_avg": torch.from_numpy(exp_avg.copy()),
            "exp_avg_sq": torch.from_numpy(exp_sq.copy()),
        }
    rng.bit_generator.state = header["rng_state"]
    return header["iteration"]


# --- the training loop ----------------------------------------------------------

def train(spec, samples, pool, cfg: TrainConfig, out_dir,
          resume: bool = False):
    """Train an operator; returns (operator, log records).

    Writes train_log.jsonl, periodic checkpoints and operator_final.ckpt under
    out_dir. Deterministic per (cfg, data); single-threaded torch.
    """
    torch.set_num_threads(1)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if cfg.mode == "hno" and pool is None:
        raise ConfigError("hno training requires a PDE state pool")

    op = nop.ValueOperator(
        spec.case_id, spec.state_dim, nop.default_lattice(spec),
        nop.default_normalizer(spec), activation=cfg.activation, q=cfg.q,
        sign_tag="cost-to-go").init_params(cfg.seed)
    prep = _Prepared(spec, op, samples, pool)
    optimizer = torch.optim.Adam(op.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x7a]))

    start_iter = 0
    ckpt_dir = out / "checkpoints"
    if resume:
        existing = sorted(ckpt_dir.glob("iter_*.op.ckpt"))
        if existing:
            latest = existing[-1]
            loaded = nop.load_operator(latest, expect_case=spec.case_id)
            op.load_state_dict(loaded.state_dict())
            start_iter = _load_trainer_state(
                latest.with_name(latest.name.replace(".op.ckpt", ".trainer.bin")),
                optimizer, rng)

    log_path = out / "train_log.jsonl"
    log_fh = open(log_path, "a" if resume and start_iter else "w")
    records = []
    wall0 = time.time()

    def make_batches(iteration):
        b = {}
        idx = rng.integers(0, prep.n_sup, size=cfg.batch_size)
        b["sup"] = torch.from_numpy(idx)
        in_refine = cfg.mode == "hno" and iteration >= cfg.pretrain_iters
        if in_refine:
            t_lo, t_hi = curriculum_window(spec, iteration, cfg)
            pidx = rng.integers(0, prep.n_pool, size=cfg.batch_size)
            times = rng.uniform(t_lo, t_hi, size=cfg.batch_size)
            b["pde"] = (torch.from_numpy(pidx), torch.from_numpy(times))
            b["boundary"] = torch.from_numpy(
                rng.integers(0, prep.n_pool, size=cfg.batch_size))
            b["window"] = (t_lo, t_hi)
        return b

    def checkpoint(iteration):
        stem = ckpt_dir / f"iter_{iteration:08d}"
        nop.save_operator(op, stem.with_name(stem.name + ".op.ckpt"))
        _save_trainer_state(stem.with_name(stem.name + ".trainer.bin"),
                            iteration, optimizer, rng)

    for iteration in range(start_iter, cfg.total_iters):
        batches = make_batches(iteration)
        optimizer.zero_grad()
        mode_now = "hno" if "pde" in batches else "sno"
        loss, terms = hno_loss(op, prep, batches, cfg.weights, mode_now)
        if not np.isfinite(terms["total"]):
            log_fh.close()
            raise NumericalError(
                f"loss diverged at iteration {iteration}; last checkpoint kept")
        loss.backward()
        optimizer.step()
        done = iteration + 1
        if done % cfg.log_every == 0 or done == cfg.total_iters:
            rec = {"iteration": done,
                   "phase": "refine" if "pde" in batches else
                            ("pretrain" if cfg.mode == "hno" else "sno"),
                   "window": list(batches.get("window", (spec.horizon, spec.horizon))),
                   "terms": terms,
                   "wall_time": time.time() - wall0}
            records.append(rec)
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
        if done % cfg.checkpoint_every == 0 or done == cfg.total_iters:
            checkpoint(done)
    log_fh.close()
    nop.save_operator(op, out / "operator_final.ckpt")
    return op, records
