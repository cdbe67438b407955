"""Dataset persistence: flat binary sample files with JSON sidecars.

Layout of a dataset directory:
    meta.json            case, type pairs, seed, solver config, counts,
                         sign-convention note, format version
    samples.bin          float64 little-endian row-major matrix
    samples.schema.json  column names, row count, dtype
    pinn_states.bin      (optional) PDE-residual state pool, same encoding
    pinn_states.schema.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import games, pmp
from .errors import ArtifactError

FORMAT_VERSION = 1


def _write_matrix(path: Path, columns: list[str], matrix: np.ndarray):
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    path.write_bytes(matrix.tobytes())
    schema = {"columns": columns, "rows": int(matrix.shape[0]),
              "dtype": "<f8", "order": "C"}
    path.with_suffix(".schema.json").write_text(
        json.dumps(schema, indent=1, sort_keys=True))


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    schema = json.loads(path.with_suffix(".schema.json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    cols = schema["columns"]
    return cols, raw.reshape(schema["rows"], len(cols)).astype(float)


def sample_columns(state_dim: int) -> list[str]:
    d2 = 2 * state_dim
    return (["t"] + [f"x{i}" for i in range(d2)] + ["value"]
            + [f"costate{i}" for i in range(d2)] + ["theta_self", "theta_other"])


def samples_to_matrix(samples: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([
        samples["t"][:, None], samples["state"], samples["value"][:, None],
        samples["costate"], samples["theta_self"][:, None],
        samples["theta_other"][:, None]], axis=1)


def matrix_to_samples(matrix: np.ndarray, state_dim: int) -> dict[str, np.ndarray]:
    d2 = 2 * state_dim
    return {
        "t": matrix[:, 0],
        "state": matrix[:, 1:1 + d2],
        "value": matrix[:, 1 + d2],
        "costate": matrix[:, 2 + d2:2 + 2 * d2],
        "theta_self": matrix[:, 2 + 2 * d2],
        "theta_other": matrix[:, 3 + 2 * d2],
    }


def write_dataset(out_dir, spec: games.GameSpec, type_pairs, seed: int,
                  solver_cfg: pmp.SolverConfig, samples: dict[str, np.ndarray],
                  pinn_states: np.ndarray | None = None,
                  extra_meta: dict | None = None) -> Path:
    """Persist a supervised dataset (and optional PDE state pool)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "samples.bin", sample_columns(spec.state_dim),
                  samples_to_matrix(samples))
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "case_id": spec.case_id,
        "state_dim": spec.state_dim,
        "type_pairs": [list(games.TypePair(*tp).astuple()) if not isinstance(tp, games.TypePair)
                       else list(tp.astuple()) for tp in type_pairs],
        "seed": int(seed),
        "solver_config": dataclasses.asdict(solver_cfg),
        "n_samples": int(samples["t"].shape[0]),
        "sign_convention": pmp.SIGN_CONVENTION_NOTE,
        "sample_columns": SAMPLE_ORDER_DOC,
    }
    if pinn_states is not None:
        cols = [f"x{i}" for i in range(2 * spec.state_dim)] + ["theta1", "theta2"]
        _write_matrix(out / "pinn_states.bin", cols, pinn_states)
        meta["n_pinn_states"] = int(pinn_states.shape[0])
    if extra_meta:
        meta.update(extra_meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


SAMPLE_ORDER_DOC = pmp.SAMPLE_COLUMNS_DOC


def read_dataset(path) -> tuple[dict, dict[str, np.ndarray], np.ndarray | None]:
    """Load meta, samples and the optional PDE state pool."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise ArtifactError(f"no dataset at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(
            f"unsupported dataset format version {meta.get('format_version')!r}; "
            f"this build reads version {FORMAT_VERSION}")
    _, matrix = _read_matrix(path / "samples.bin")
    samples = matrix_to_samples(matrix, meta["state_dim"])
    pool = None
    if (path / "pinn_states.bin").exists():
        _, pool = _read_matrix(path / "pinn_states.bin")
    return meta, samples, pool


def export_csv(dataset_dir, out_path):
    """Inspection export; %.17g round-trips float64 exactly."""
    path = Path(dataset_dir)
    cols, matrix = _read_matrix(path / "samples.bin")
    with open(out_path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in matrix:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    return Path(out_path)


def file_hash(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def tree_hash(root) -> str:
    """Order-independent content hash of every regular file under root."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".lock"):
            h.update(os.fspath(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
