"""Branch-trunk value operator with a Boolean constraint-lattice input.

The branch network reads a Boolean vector marking which lattice nodes violate
the type-dependent collision constraint; the trunk network reads the
normalized (joint state, time); the value estimate is their inner product.
Lattice nodes live in separation coordinates, the affine image of the joint
state in which the between-player distance is a plain Euclidean norm, so one
small grid covers the collision-relevant subspace for every type pair.

Everything runs in float64: downstream tests difference these networks
against finite perturbations at 1e-5/1e-3 tolerances.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import games
from .errors import ArtifactError, ConfigError

CHECKPOINT_MAGIC = b"HJIVALOP\n"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("tanh", "sin", "relu")
SLOPE_GAIN = 10.0
SLOPE_INIT = 0.1


@dataclasses.dataclass(frozen=True)
class Lattice:
    """Fixed grid over separation coordinates; nodes in C order (last axis fastest)."""

    case_id: str
    axes: tuple[tuple[str, float, float, int], ...]

    @property
    def n_nodes(self) -> int:
        out = 1
        for _, _, _, n in self.axes:
            out *= n
        return out

    def nodes(self) -> np.ndarray:
        grids = [np.linspace(lo, hi, n) for _, lo, hi, n in self.axes]
        mesh = np.meshgrid(*grids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def default_lattice(spec: games.GameSpec) -> Lattice:
    if spec.case_id == "narrow_road":
        axes = (("mirror_gap", -120.0, 40.0, 30), ("dy", -8.0, 8.0, 30))
    elif spec.case_id == "lane_change":
        axes = (("dx", -90.0, 90.0, 30), ("dy", -8.0, 8.0, 30))
    elif spec.case_id == "drone":
        axes = (("mirror_gap_x", -26.0, 5.0, 12), ("mirror_gap_y", -26.0, 5.0, 12),
                ("dz", -4.7, 4.7, 12))
    else:
        raise ConfigError(f"unknown case id {spec.case_id!r}")
    return Lattice(case_id=spec.case_id, axes=axes)


def build_branch_input(spec: games.GameSpec, tp: games.TypePair,
                       lattice: Lattice) -> np.ndarray:
    """Boolean vector: 1 where a lattice node violates the constraint for tp."""
    if lattice.case_id != spec.case_id:
        raise ConfigError(f"lattice built for {lattice.case_id!r}, "
                          f"spec is {spec.case_id!r}")
    nodes = lattice.nodes()
    dist = np.sqrt(np.sum(nodes * nodes, axis=-1))
    eta = games.collision_threshold(spec, tp)
    return (dist <= eta).astype(np.float64)


@dataclasses.dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map of (joint state, t) onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def encode(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0

    def decode(self, z: np.ndarray) -> np.ndarray:
        return (z + 1.0) * (self.hi - self.lo) / 2.0 + self.lo

    def grad_scale(self) -> np.ndarray:
        """d(normalized)/d(physical), per dimension."""
        return 2.0 / (self.hi - self.lo)


def default_normalizer(spec: games.GameSpec) -> Normalizer:
    """Covers the union of both players' sampling boxes in either ego slot, plus [0, T]."""
    lo_state = np.minimum(spec.x_gt[:, :, 0].min(axis=0), spec.x_hj[:, :, 0].min(axis=0))
    hi_state = np.maximum(spec.x_gt[:, :, 1].max(axis=0), spec.x_hj[:, :, 1].max(axis=0))
    lo = np.concatenate([lo_state, lo_state, [0.0]])
    hi = np.concatenate([hi_state, hi_state, [spec.horizon]])
    return Normalizer(lo=lo, hi=hi)


class _Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, depth: int, out_dim: int):
        super().__init__()
        dims = [in_dim] + [hidden] * depth
        self.layers = nn.ModuleList(
            [nn.Linear(dims[i], dims[i + 1]).double() for i in range(depth)])
        self.head = nn.Linear(hidden, out_dim).double()
        self.slopes = nn.Parameter(torch.full((depth,), SLOPE_INIT, dtype=torch.float64))

    def forward(self, x, act):
        for i, layer in enumerate(self.layers):
            x = act(SLOPE_GAIN * self.slopes[i] * layer(x))
        return self.head(x)


def _activation(name: str):
    if name == "tanh":
        return torch.tanh
    if name == "sin":
        return torch.sin
    if name == "relu":
        return torch.relu
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


class ValueOperator(nn.Module):
    """Parametric value estimate: branch(constraint bits) . trunk(state, t)."""

    def __init__(self, case_id: str, state_dim: int, lattice: Lattice,
                 normalizer: Normalizer, activation: str = "tanh", q: int = 64,
                 hidden: int = 64, depth: int = 3, sign_tag: str = ""):
        super().__init__()
        if q < 1:
            raise ConfigError("q must be >= 1")
        self.case_id = case_id
        self.state_dim = state_dim
        self.lattice = lattice
        self.normalizer = normalizer
        self.activation = activation
        self.q = q
        self.hidden = hidden
        self.depth = depth
        self.sign_tag = sign_tag
        self._act = _activation(activation)
        self.branch = _Mlp(lattice.n_nodes, hidden, depth, q)
        self.trunk = _Mlp(2 * state_dim + 1, hidden, depth, q)
        self._bits_cache: dict[tuple[float, float], torch.Tensor] = {}

    def init_params(self, seed: int):
        """Xavier-uniform weights, zero biases, from a dedicated generator."""
        gen = torch.Generator().manual_seed(int(seed))
        for mlp in (self.branch, self.trunk):
            for layer in list(mlp.layers) + [mlp.head]:
                fan_in, fan_out = layer.in_features, layer.out_features
                bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
                with torch.no_grad():
                    layer.weight.copy_(
                        (torch.rand(layer.weight.shape, generator=gen,
                                    dtype=torch.float64) * 2.0 - 1.0) * bound)
                    layer.bias.zero_()
            with torch.no_grad():
                mlp.slopes.fill_(SLOPE_INIT)
        return self

    def forward(self, bits: torch.Tensor, xt_norm: torch.Tensor) -> torch.Tensor:
        b = self.branch(bits, self._act)
        t = self.trunk(xt_norm, self._act)
        return (b * t).sum(dim=-1)

    # --- convenience around physical units -----------------------------------

    def bits_for(self, spec: games.GameSpec, tp: games.TypePair) -> torch.Tensor:
        key = tp.astuple()
        if key not in self._bits_cache:
            self._bits_cache[key] = torch.from_numpy(
                build_branch_input(spec, tp, self.lattice))
        return self._bits_cache[key]

    def encode_inputs(self, xj: np.ndarray, t: np.ndarray) -> torch.Tensor:
        xt = np.concatenate([np.atleast_2d(xj),
                             np.atleast_1d(t)[:, None]], axis=1)
        return torch.from_numpy(self.normalizer.encode(xt))

    def value(self, spec, tp, xj: np.ndarray, t: np.ndarray) -> np.ndarray:
        xt = self.encode_inputs(xj, t)
        bits = self.bits_for(spec, tp).expand(xt.shape[0], -1)
        with torch.no_grad():
            return self(bits, xt).numpy()

    def value_and_gradient(self, spec, tp, xj: np.ndarray, t: np.ndarray):
        """Value, d/d(joint state) and d/dt in physical units."""
        xt = self.encode_inputs(xj, t).requires_grad_(True)
        bits = self.bits_for(spec, tp).expand(xt.shape[0], -1)
        v = self(bits, xt)
        g = torch.autograd.grad(v.sum(), xt)[0].numpy()
        g = g * self.normalizer.grad_scale()[None, :]
        return v.detach().numpy(), g[:, :-1], g[:, -1]


# --- checkpoints --------------------------------------------------------------

def save_operator(op: ValueOperator, path) -> Path:
    header = {
        "version": CHECKPOINT_VERSION,
        "case_id": op.case_id,
        "state_dim": op.state_dim,
        "activation": op.activation,
        "q": op.q,
        "hidden": op.hidden,
        "depth": op.depth,
        "lattice": {"case_id": op.lattice.case_id,
                    "axes": [list(a) for a in op.lattice.axes]},
        "normalizer": {"lo": op.normalizer.lo.tolist(),
                       "hi": op.normalizer.hi.tolist()},
        "sign_tag": op.sign_tag,
        "params": [[name, list(p.shape)] for name, p in op.named_parameters()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in op.named_parameters():
            fh.write(np.ascontiguousarray(
                p.detach().numpy(), dtype="<f8").tobytes())
    tmp.replace(out)
    return out


def load_operator(path, expect_case: str | None = None) -> ValueOperator:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ArtifactError(f"{path} is not an operator checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off:off + 8])
    header = json.loads(data[off + 8:off + 8 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(
            f"unsupported checkpoint version {header.get('version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}")
    if expect_case is not None and header["case_id"] != expect_case:
        raise ArtifactError(f"checkpoint case {header['case_id']!r} does not "
                            f"match expected {expect_case!r}")
    lattice = Lattice(case_id=header["lattice"]["case_id"],
                      axes=tuple(tuple(a) for a in header["lattice"]["axes"]))
    norm = Normalizer(lo=np.array(header["normalizer"]["lo"]),
                      hi=np.array(header["normalizer"]["hi"]))
    op = ValueOperator(header["case_id"], header["state_dim"], lattice, norm,
                       activation=header["activation"], q=header["q"],
                       hidden=header["hidden"], depth=header["depth"],
                       sign_tag=header["sign_tag"])
    cursor = off + 8 + hlen
    named = dict(op.named_parameters())
    with torch.no_grad():
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            block = np.frombuffer(data[cursor:cursor + 8 * n], dtype="<f8")
            if block.size != n:
                raise ArtifactError(f"truncated checkpoint block {name!r}")
            named[name].copy_(torch.from_numpy(block.reshape(shape).copy()))
            cursor += 8 * n
    if cursor != len(data):
        raise ArtifactError("trailing bytes in checkpoint")
    return op
