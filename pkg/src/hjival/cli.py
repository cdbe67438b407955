"""Command-line pipeline: datagen, train, eval, ntk, plot, validate-config.

Every stage writes into its own subdirectory of output_dir together with a
manifest (config hash, input/output content hashes, wall time). All stage
randomness is derived from the root seed through named substreams, so stages
rerun identically and independently. Exit codes: 0 success, 2 config error,
3 numerical failure, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datasets, games, ntk, plotting, pmp, rollout, training
from . import neural_operator as nop
from .errors import ArtifactError, ConfigError, NumericalError

LOCK_NAME = ".hjival.lock"


@contextmanager
def output_lock(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = output_dir / LOCK_NAME
    if lock.exists():
        try:
            pid = int(lock.read_text().strip())
            os.kill(pid, 0)
            raise ArtifactError(
                f"output dir {output_dir} is locked by running pid {pid}")
        except (ValueError, ProcessLookupError, PermissionError):
            lock.unlink(missing_ok=True)   # stale lock
    lock.write_text(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_manifest(stage_dir: Path, stage: str, cfg: dict, wall: float,
                    inputs: dict, outputs: dict):
    manifest = {
        "stage": stage,
        "tool_version": cfgmod.TOOL_VERSION,
        "config_hash": cfgmod.config_hash(cfg),
        "seed": cfg["seed"],
        "created_unix": time.time(),
        "wall_time_s": wall,
        "inputs": inputs,
        "outputs": outputs,
    }
    (stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                        sort_keys=True))


def _workers(cfg: dict) -> int:
    w = cfg["datagen"]["workers"]
    if w:
        return int(w)
    return int(os.environ.get("HJIVAL_WORKERS", "1"))


def cmd_datagen(cfg: dict) -> Path:
    spec = cfgmod.game_spec(cfg)
    pairs = cfgmod.train_pairs(cfg)
    n_total = cfg["datagen"]["n_trajectories"]
    if n_total % len(pairs):
        raise ConfigError(f"n_trajectories={n_total} not divisible by "
                          f"{len(pairs)} training pairs")
    out = Path(cfg["output_dir"]) / "dataset"
    solver_cfg = cfgmod.solver_config(cfg)
    seed = cfgmod.stream_seed(cfg["seed"], "datagen")
    t0 = time.time()
    _, samples, failures = pmp.generate_dataset(
        spec, pairs, n_total // len(pairs), seed=seed, cfg=solver_cfg,
        workers=_workers(cfg))
    pool = None
    if cfg["mode"] == "hno":
        pool = training.sample_pinn_pool(
            spec, pairs, cfg["datagen"]["n_pinn_states"],
            seed=cfgmod.stream_seed(cfg["seed"], "pinn_pool"))
    datasets.write_dataset(out, spec, pairs, seed, solver_cfg, samples,
                           pinn_states=pool,
                           extra_meta={"mode": cfg["mode"],
                                       "n_failures": len(failures)})
    wall = time.time() - t0
    _write_manifest(out, "datagen", cfg, wall, inputs={},
                    outputs={"dataset": datasets.tree_hash(out)})
    return out


def cmd_train(cfg: dict, resume: bool = False) -> Path:
    spec = cfgmod.game_spec(cfg)
    data_dir = Path(cfg["output_dir"]) / "dataset"
    meta, samples, pool = datasets.read_dataset(data_dir)
    if meta["case_id"] != spec.case_id:
        raise ArtifactError(f"dataset case {meta['case_id']!r} does not match "
                            f"config case {spec.case_id!r}")
    if cfg["mode"] == "hno" and pool is None:
        raise ArtifactError("hno training needs a dataset generated with "
                            "mode=hno (PDE state pool missing)")
    out = Path(cfg["output_dir"]) / "train"
    t0 = time.time()
    training.train(spec, samples, pool, cfgmod.train_config(cfg), out,
                   resume=resume)
    wall = time.time() - t0
    _write_manifest(out, "train", cfg, wall,
                    inputs={"dataset": datasets.tree_hash(data_dir)},
                    outputs={"checkpoint": datasets.file_hash(
                        out / "operator_final.ckpt")})
    return out


def _load_checkpoints(cfg: dict, items: list[str], default_key: str) -> dict:
    paths = {}
    if not items:
        default = Path(cfg["output_dir"]) / "train" / "operator_final.ckpt"
        if not default.exists():
            raise ArtifactError(f"no checkpoint at {default}; pass --checkpoint")
        paths[default_key] = default
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--checkpoint expects name=path, got {item!r}")
        name, _, p = item.partition("=")
        paths[name] = Path(p)
    return paths


def _budget_rows(paths: dict) -> list[dict]:
    rows = []
    for name, ckpt in paths.items():
        run_dir = Path(ckpt).parent.parent
        row = {"model": name, "datagen_s": None, "train_s": None, "total_s": None}
        for stage in ("dataset", "train"):
            man = run_dir / stage / "manifest.json"
            if man.exists():
                wall = json.loads(man.read_text())["wall_time_s"]
                row["datagen_s" if stage == "dataset" else "train_s"] = wall
        if row["datagen_s"] is not None and row["train_s"] is not None:
            row["total_s"] = row["datagen_s"] + row["train_s"]
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["%.17g" % row[c] if isinstance(row[c], float)
                             else row[c] for c in columns])


def cmd_eval(cfg: dict, checkpoint_items: list[str]) -> Path:
    spec = cfgmod.game_spec(cfg)
    paths = _load_checkpoints(cfg, checkpoint_items, cfg["mode"])
    models = {name: nop.load_operator(p, expect_case=spec.case_id)
              for name, p in paths.items()}
    out = Path(cfg["output_dir"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rcfg = cfgmod.rollout_config(cfg)
    t0 = time.time()
    cells = rollout.evaluate_cells(
        models, spec, cfg["eval"]["grid"], rcfg,
        solver_cfg=cfgmod.solver_config(cfg),
        trained_pairs=[tuple(p) for p in cfg["train_pairs"]])
    wall = time.time() - t0
    rows = rollout.cells_to_rows(cells)
    _write_csv(out / "report.csv", rows,
               ["model", "theta1", "theta2", "seen_flag", "n_gt", "n_pred",
                "col_rate"])
    payload = plotting.heatmap_payload(cells, cfg["eval"]["grid"])
    plotting.write_matrix_json(payload, out / "heatmap.json")
    budget = _budget_rows(paths)
    if budget:
        _write_csv(out / "budget.csv", budget,
                   ["model", "datagen_s", "train_s", "total_s"])
    _write_manifest(out, "eval", cfg, wall,
                    inputs={name: datasets.file_hash(p) for name, p in paths.items()},
                    outputs={"report": datasets.file_hash(out / "report.csv"),
                             "heatmap": datasets.file_hash(out / "heatmap.json")})
    return out


def cmd_ntk(cfg: dict, checkpoint_items: list[str]) -> Path:
    spec = cfgmod.game_spec(cfg)
    paths = _load_checkpoints(cfg, checkpoint_items, cfg["activation"])
    ops = {name: nop.load_operator(p, expect_case=spec.case_id)
           for name, p in paths.items()}
    data_dir = Path(cfg["output_dir"]) / "dataset"
    _, samples, _ = datasets.read_dataset(data_dir)
    out = Path(cfg["output_dir"]) / "ntk"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    results, ratios = ntk.diagnose(
        ops, spec, samples, cfgmod.train_pairs(cfg),
        m=cfg["ntk"]["m_points"], seed=cfgmod.stream_seed(cfg["seed"], "ntk"))
    wall = time.time() - t0
    _write_csv(out / "ntk.csv",
               [{"activation": r.activation, "theta1": r.type_pair[0],
                 "theta2": r.type_pair[1], "kappa": r.kappa,
                 "floored_flag": int(r.floored)} for r in results],
               ["activation", "theta1", "theta2", "kappa", "floored_flag"])
    outputs = {"ntk": datasets.file_hash(out / "ntk.csv")}
    if ratios:
        _write_csv(out / "ratios.csv", ratios,
                   ["theta1", "theta2", "kappa_tanh", "kappa_sin", "kappa_relu",
                    "r1", "r2"])
        outputs["ratios"] = datasets.file_hash(out / "ratios.csv")
    _write_manifest(out, "ntk", cfg, wall,
                    inputs={name: datasets.file_hash(p) for name, p in paths.items()},
                    outputs=outputs)
    return out


def cmd_plot(cfg: dict, heatmap_json: str | None) -> Path:
    src = Path(heatmap_json) if heatmap_json \
        else Path(cfg["output_dir"]) / "eval" / "heatmap.json"
    if not src.exists():
        raise ArtifactError(f"no heatmap data at {src}")
    payload = json.loads(src.read_text())
    return plotting.render_heatmap(payload, src.with_suffix(".png"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hjival",
        description="Differential-game value operators: data, training, "
                    "safety evaluation, kernel diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("validate-config", "datagen", "train", "eval", "ntk", "plot"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY.PATH=VALUE")
        if name == "train":
            p.add_argument("--resume", action="store_true")
        if name in ("eval", "ntk"):
            p.add_argument("--checkpoint", action="append", default=[],
                           metavar="NAME=PATH")
        if name == "plot":
            p.add_argument("--heatmap", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, args.override)
        if args.command == "validate-config":
            print(json.dumps({"ok": True, "config_hash": cfgmod.config_hash(cfg)}))
            return 0
        out_dir = Path(cfg["output_dir"])
        with output_lock(out_dir):
            if args.command == "datagen":
                print(cmd_datagen(cfg))
            elif args.command == "train":
                print(cmd_train(cfg, resume=args.resume))
            elif args.command == "eval":
                print(cmd_eval(cfg, args.checkpoint))
            elif args.command == "ntk":
                print(cmd_ntk(cfg, args.checkpoint))
            elif args.command == "plot":
                print(cmd_plot(cfg, args.heatmap))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
