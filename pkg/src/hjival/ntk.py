"""Empirical tangent-kernel diagnostics for trained operators.

The kernel is J J^T over the full parameter Jacobian of the scalar operator
output at sampled training points. Its condition number (largest over
smallest eigenvalue) is the per-activation quantity compared across
activations; the smallest eigenvalue is floored before division and flagged
when the floor binds (duplicated points make the kernel exactly singular).
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from . import games
from . import neural_operator as nop
from .errors import NumericalError

EIG_FLOOR = 1e-300


@dataclasses.dataclass
class NTKResult:
    kernel: np.ndarray                # (M, M)
    eigenvalues: np.ndarray           # descending
    kappa: float
    floored: bool
    activation: str
    type_pair: tuple[float, float]
    seed: int


def parameter_jacobian(op: nop.ValueOperator, bits: torch.Tensor,
                       xt: torch.Tensor) -> np.ndarray:
    """(M, n_params) Jacobian of the operator output, parameters flattened in
    named_parameters order."""
    params = [p for _, p in op.named_parameters()]
    n_params = sum(p.numel() for p in params)
    m = xt.shape[0]
    jac = np.empty((m, n_params))
    for i in range(m):
        op.zero_grad()
        v = op(bits[i:i + 1], xt[i:i + 1])[0]
        grads = torch.autograd.grad(v, params, allow_unused=True)
        row = []
        for p, g in zip(params, grads):
            row.append(np.zeros(p.numel()) if g is None
                       else g.detach().numpy().ravel())
        jac[i] = np.concatenate(row)
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite parameter Jacobian")
    return jac


def sample_points(samples: dict[str, np.ndarray], tp: games.TypePair,
                  m: int, seed: int):
    """Subsample M supervised rows of the given type pair."""
    mask = ((samples["theta_self"] == tp.theta_self)
            & (samples["theta_other"] == tp.theta_other))
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise NumericalError(f"no supervised rows for type pair {tp.astuple()}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1c]))
    take = rng.choice(idx, size=min(m, idx.size), replace=False)
    take = np.sort(take)
    return samples["state"][take], samples["t"][take]


def ntk_matrix(op: nop.ValueOperator, spec: games.GameSpec, tp: games.TypePair,
               states: np.ndarray, times: np.ndarray, seed: int = 0) -> NTKResult:
    if states.shape[0] < 1:
        raise NumericalError("need at least one point")
    torch.set_num_threads(1)
    xt = op.encode_inputs(states, times)
    bits = op.bits_for(spec, tp).expand(xt.shape[0], -1)
    jac = parameter_jacobian(op, bits, xt)
    kernel = jac @ jac.T
    sym = 0.5 * (kernel + kernel.T)
    eig = np.linalg.eigvalsh(sym)[::-1].copy()
    lam_max, lam_min = float(eig[0]), float(eig[-1])
    floored = lam_min < EIG_FLOOR
    kappa = lam_max / max(lam_min, EIG_FLOOR)
    return NTKResult(kernel=sym, eigenvalues=eig, kappa=float(kappa),
                     floored=bool(floored), activation=op.activation,
                     type_pair=tp.astuple(), seed=seed)


def ratio_rows(kappas: dict[str, dict[tuple[float, float], float]],
               type_pairs) -> list[dict]:
    """Cross-activation condition-number ratios, one row per type pair."""
    rows = []
    for tp in type_pairs:
        key = games.TypePair(*tp).astuple() if not isinstance(tp, games.TypePair) \
            else tp.astuple()
        k_tanh = kappas["tanh"][key]
        rows.append({
            "theta1": key[0], "theta2": key[1],
            "kappa_tanh": k_tanh,
            "kappa_sin": kappas["sin"][key],
            "kappa_relu": kappas["relu"][key],
            "r1": k_tanh / kappas["sin"][key],
            "r2": k_tanh / kappas["relu"][key],
        })
    return rows


def diagnose(ops: dict[str, nop.ValueOperator], spec: games.GameSpec,
             samples: dict[str, np.ndarray], type_pairs, m: int = 200,
             seed: int = 0):
    """Kappa per (activation, type pair) on identical point samples; ratio rows."""
    results: list[NTKResult] = []
    kappas: dict[str, dict] = {a: {} for a in ops}
    for tp in [games.TypePair(*p) if not isinstance(p, games.TypePair) else p
               for p in type_pairs]:
        states, times = sample_points(samples, tp, m, seed)
        for act, op in ops.items():
            res = ntk_matrix(op, spec, tp, states, times, seed=seed)
            results.append(res)
            kappas[act][tp.astuple()] = res.kappa
    rows = ratio_rows(kappas, type_pairs) if set(kappas) >= {"tanh", "sin", "relu"} \
        else []
    return results, rows
