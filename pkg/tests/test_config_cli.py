import json
import os
from pathlib import Path

import numpy as np
import pytest

from hjival import cli, config, datasets
from hjival.errors import ConfigError


def tiny_config(out_dir, **kw):
    cfg = {
        "case": "narrow_road",
        "mode": "hno",
        "seed": 3,
        "output_dir": str(out_dir),
        "train_pairs": [[1, 1]],
        "datagen": {"n_trajectories": 1, "n_pinn_states": 8},
        "train": {"pretrain_iters": 4, "refine_iters": 4, "batch_size": 4,
                  "checkpoint_every": 8, "log_every": 2,
                  "learning_rate": 1e-4},
        "eval": {"n_test": 2, "grid": [1]},
        "ntk": {"m_points": 4},
    }
    cfg.update(kw)
    return cfg


def write_config(tmp_path, cfg):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return p


class TestConfig:
    def test_defaults_and_validation(self):
        cfg = config.validate({"case": "drone", "mode": "sno"})
        assert cfg["train"]["learning_rate"] == 1e-4  # per-case default
        assert cfg["eval"]["n_test"] == 600
        assert cfg["train_pairs"] == [[1, 1], [1, 5], [5, 1], [5, 5]]

    def test_case1_default_lr(self):
        assert config.validate({})["train"]["learning_rate"] == 2e-5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config.validate({"turbo": True})
        with pytest.raises(ConfigError, match="solver"):
            config.validate({"solver": {"warp": 9}})

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            config.validate({"mode": "pno"})
        with pytest.raises(ConfigError):
            config.validate({"train_pairs": [[0.2, 1]]})

    def test_overrides(self, tmp_path):
        p = write_config(tmp_path, {"case": "narrow_road"})
        cfg = config.load(p, overrides=["train.batch_size=16", "seed=9"])
        assert cfg["train"]["batch_size"] == 16 and cfg["seed"] == 9

    def test_stream_seeds_stable_and_distinct(self):
        a = config.stream_seed(7, "datagen")
        assert a == config.stream_seed(7, "datagen")
        assert a != config.stream_seed(7, "train")
        assert a != config.stream_seed(8, "datagen")

    def test_config_hash_sensitivity(self):
        c1 = config.validate({"seed": 1})
        c2 = config.validate({"seed": 2})
        assert config.config_hash(c1) != config.config_hash(c2)
        assert config.config_hash(c1) == config.config_hash(config.validate({"seed": 1}))


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Run the full tiny pipeline once; several tests inspect the artifacts."""
    tmp = tmp_path_factory.mktemp("pipe")
    out = tmp / "run"
    cfgfile = write_config(tmp, tiny_config(out))
    assert cli.main(["datagen", "--config", str(cfgfile)]) == 0
    assert cli.main(["train", "--config", str(cfgfile)]) == 0
    assert cli.main(["eval", "--config", str(cfgfile)]) == 0
    assert cli.main(["ntk", "--config", str(cfgfile)]) == 0
    assert cli.main(["plot", "--config", str(cfgfile)]) == 0
    return tmp, out, cfgfile


class TestPipeline:
    def test_validate_config_command(self, tmp_path):
        p = write_config(tmp_path, tiny_config(tmp_path / "x"))
        assert cli.main(["validate-config", "--config", str(p)]) == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"zap": 1}))
        assert cli.main(["validate-config", "--config", str(bad)]) == 2

    def test_artifacts_exist(self, pipeline_dir):
        tmp, out, cfgfile = pipeline_dir
        assert (out / "dataset" / "samples.bin").exists()
        assert (out / "dataset" / "pinn_states.bin").exists()
        assert (out / "train" / "operator_final.ckpt").exists()
        assert (out / "train" / "train_log.jsonl").exists()
        assert (out / "eval" / "report.csv").exists()
        assert (out / "eval" / "heatmap.json").exists()
        assert (out / "eval" / "heatmap.png").exists()
        assert (out / "ntk" / "ntk.csv").exists()
        for stage in ("dataset", "train", "eval", "ntk"):
            man = json.loads((out / stage / "manifest.json").read_text())
            assert man["stage"] in ("datagen", "train", "eval", "ntk")
            assert man["wall_time_s"] >= 0

    def test_report_shape(self, pipeline_dir):
        tmp, out, cfgfile = pipeline_dir
        rows = (out / "eval" / "report.csv").read_text().strip().splitlines()
        assert rows[0] == "model,theta1,theta2,seen_flag,n_gt,n_pred,col_rate"
        assert len(rows) == 2  # 1 grid cell x 1 model
        payload = json.loads((out / "eval" / "heatmap.json").read_text())
        assert "hno" in payload["models"]

    def test_missing_artifact_exit_code(self, pipeline_dir):
        tmp, out, cfgfile = pipeline_dir
        cfg2 = tiny_config(tmp / "empty_run")
        p = write_config(tmp, {**cfg2, "output_dir": str(tmp / "empty_run")})
        p2 = tmp / "cfg2.json"
        p2.write_text(json.dumps(cfg2))
        assert cli.main(["eval", "--config", str(p2)]) == 4

    def test_lock_rejects_concurrent(self, pipeline_dir):
        tmp, out, cfgfile = pipeline_dir
        lock = out / cli.LOCK_NAME
        lock.write_text(str(os.getpid()))   # a live pid
        try:
            assert cli.main(["plot", "--config", str(cfgfile)]) == 4
        finally:
            lock.unlink()

    def test_datagen_determinism(self, tmp_path):
        base = tiny_config(tmp_path / "r1")
        p1 = tmp_path / "c1.json"
        p1.write_text(json.dumps(base))
        assert cli.main(["datagen", "--config", str(p1)]) == 0
        h1 = datasets.tree_hash(tmp_path / "r1" / "dataset")
        base2 = dict(base, output_dir=str(tmp_path / "r2"))
        p2 = tmp_path / "c2.json"
        p2.write_text(json.dumps(base2))
        assert cli.main(["datagen", "--config", str(p2)]) == 0
        assert datasets.tree_hash(tmp_path / "r2" / "dataset") == h1


class TestGameOverrides:
    def test_game_override_table(self):
        from hjival import config as cfgmod
        cfg = cfgmod.validate({"game_overrides": {"penalty_scale": 500.0}})
        spec = cfgmod.game_spec(cfg)
        assert spec.penalty_scale == 500.0

    def test_bad_game_override_rejected(self):
        from hjival import config as cfgmod
        with pytest.raises(ConfigError):
            cfgmod.game_spec(cfgmod.validate({"game_overrides": {"nope": 1}}))


class TestReportReader:
    def test_round_trip(self, pipeline_dir):
        from hjival import rollout
        tmp, out, cfgfile = pipeline_dir
        cells = rollout.read_report_csv(out / "eval" / "report.csv")
        assert len(cells) == 1
        assert cells[0].model == "hno" and cells[0].n_gt == 2
        assert 0.0 <= cells[0].col_rate <= 1.0
