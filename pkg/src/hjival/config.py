"""Pipeline configuration: one JSON file, schema-validated, seed substreams.

Every stage derives its randomness from the root seed through a named
substream, so stages can be re-run independently without perturbing each
other. Unknown keys anywhere in the file are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from . import games, pmp, rollout, training
from .errors import ConfigError

TOOL_VERSION = "0.1.0"

CASE_DEFAULT_LR = {"narrow_road": 2e-5, "lane_change": 1e-4, "drone": 1e-4}

DEFAULTS = {
    "case": "narrow_road",
    "mode": "hno",
    "activation": "tanh",
    "seed": 0,
    "output_dir": "runs/default",
    "train_pairs": [[1, 1], [1, 5], [5, 1], [5, 5]],
    "game_overrides": {},             # optional GameSpec field overrides
    "datagen": {
        "n_trajectories": 1000,       # total across train_pairs
        "n_pinn_states": 62000,
        "workers": 0,                 # 0: use HJIVAL_WORKERS or 1
    },
    "solver": {
        "tol": 1e-6,
        "segments": 8,
        "max_newton_iters": 25,
        "max_restarts": 2,
        "rtol": 1e-8,
        "atol": 1e-8,
        "coarse_rtol": 1e-6,
        "polish_rtol": 1e-11,
        "penalty_ladder": [100.0, 1000.0],
        "horizon_stages": 4,
        "fd_step": 1e-7,
        "max_fail_fraction": 0.5,
    },
    "train": {
        "learning_rate": None,        # None: per-case default
        "batch_size": 256,
        "pretrain_iters": 100000,
        "refine_iters": 200000,
        "loss_weights": {"c1": 100.0, "c2": 100.0, "c3": 10.0},
        "q": 64,
        "checkpoint_every": 10000,
        "log_every": 100,
    },
    "eval": {
        "n_test": 600,
        "integrator": "rk4",
        "dt": 0.1,
        "grid": [1, 2, 3, 4, 5],
        "test_seed": None,            # None: derive from root seed
    },
    "ntk": {
        "m_points": 200,
    },
}


def _check_keys(given: dict, allowed: dict, path: str):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          f"{sorted(unknown)}")


def validate(raw: dict) -> dict:
    """Fill defaults, reject unknown keys, sanity-check values."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, DEFAULTS, "")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(DEFAULTS[key], dict) and key != "game_overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            _check_keys(value, DEFAULTS[key], key)
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["case"] not in games.CASES:
        raise ConfigError(f"unknown case {cfg['case']!r}")
    if cfg["mode"] not in ("hno", "sno"):
        raise ConfigError(f"mode must be hno or sno, got {cfg['mode']!r}")
    if cfg["activation"] not in ("tanh", "sin", "relu"):
        raise ConfigError(f"unknown activation {cfg['activation']!r}")
    if cfg["train"]["learning_rate"] is None:
        cfg["train"]["learning_rate"] = CASE_DEFAULT_LR[cfg["case"]]
    for pair in cfg["train_pairs"]:
        games.TypePair(float(pair[0]), float(pair[1]))
    if cfg["datagen"]["n_trajectories"] < len(cfg["train_pairs"]):
        raise ConfigError("n_trajectories must cover at least one trajectory "
                          "per training pair")
    return cfg


def load(path, overrides: list[str] | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value: {item!r}")
        key, _, value = item.partition("=")
        _apply_override(raw, key.strip(), value.strip())
    return validate(raw)


def _apply_override(raw: dict, dotted: str, value: str):
    node = raw
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into {p!r} of override {dotted!r}")
    node[parts[-1]] = json.loads(value) if value and value[0] in "[{0123456789-tfn\"" \
        else value


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def stream_seed(root_seed: int, name: str) -> int:
    """Stable per-stage substream seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


# --- typed views -------------------------------------------------------------

ARRAY_SPEC_FIELDS = ("control_lo", "control_hi", "mirror_shift", "x_gt", "x_hj")


def game_spec(cfg: dict) -> games.GameSpec:
    overrides = None
    if cfg.get("game_overrides"):
        overrides = {k: (np.asarray(v, dtype=float) if k in ARRAY_SPEC_FIELDS
                         else (tuple(v) if k == "lane_targets" else v))
                     for k, v in cfg["game_overrides"].items()}
    return games.make_spec(cfg["case"], overrides)


def solver_config(cfg: dict) -> pmp.SolverConfig:
    s = cfg["solver"]
    return pmp.SolverConfig(
        tol=s["tol"], segments=s["segments"],
        max_newton_iters=s["max_newton_iters"], max_restarts=s["max_restarts"],
        rtol=s["rtol"], atol=s["atol"], coarse_rtol=s["coarse_rtol"],
        polish_rtol=s["polish_rtol"],
        penalty_ladder=tuple(s["penalty_ladder"]),
        horizon_stages=s["horizon_stages"], fd_step=s["fd_step"],
        max_fail_fraction=s["max_fail_fraction"])


def train_config(cfg: dict) -> training.TrainConfig:
    t = cfg["train"]
    return training.TrainConfig(
        mode=cfg["mode"], learning_rate=t["learning_rate"],
        batch_size=t["batch_size"], pretrain_iters=t["pretrain_iters"],
        refine_iters=t["refine_iters"],
        weights=training.LossWeights(**t["loss_weights"]),
        activation=cfg["activation"], q=t["q"],
        seed=stream_seed(cfg["seed"], "train"),
        checkpoint_every=t["checkpoint_every"], log_every=t["log_every"])


def rollout_config(cfg: dict) -> rollout.RolloutConfig:
    e = cfg["eval"]
    seed = e["test_seed"] if e["test_seed"] is not None \
        else stream_seed(cfg["seed"], "eval")
    return rollout.RolloutConfig(dt=e["dt"], integrator=e["integrator"],
                                 n_test=e["n_test"], seed=int(seed))


def train_pairs(cfg: dict) -> list[games.TypePair]:
    return [games.TypePair(float(a), float(b)) for a, b in cfg["train_pairs"]]
