"""
コマンドラインのテスト
"""

import csv
import json
import logging

import pytest

from main import ABLATION_ROWS, MainController, build_parser, main

TINY = {
    "seed": 0,
    "data": {"classes": 6, "per_class": 6, "test_per_class": 3, "image_shape": [3, 8, 8], "base": 2, "phases": 2},
    "model": {"channels": [4], "strides": [1]},
    "train": {"epochs": 1, "batch_size": 8, "lr": 0.01},
    "runtime": {"progress": False, "plots": False},
}


@pytest.fixture
def tiny_config(tmp_path):
    payload = dict(TINY, output_dir=str(tmp_path / "out"))
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


class TestParser:
    def test_values_list(self):
        args = build_parser().parse_args(["sweep-sigma", "--config", "c.json", "--values", "0.0,0.4,1"])
        assert args.values == [0.0, 0.4, 1.0]

    def test_repeated_set(self):
        args = build_parser().parse_args(["train", "--config", "c.json", "--set", "a=1", "--set", "b=2"])
        assert args.overrides == ["a=1", "b=2"]

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestTrain:
    def test_writes_run_directory(self, tmp_path, tiny_config):
        assert main(["--log-level", "WARNING", "train", "--config", tiny_config,
                     "--set", "runtime.plots=true"]) == 0
        out = tmp_path / "out"
        for name in ("metrics.json", "metrics.csv", "config.json", "resources.json", "run.log",
                     "accuracy_curve.png", "per_class_phase3.csv"):
            assert (out / name).exists(), name
        metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        assert len(metrics["overall"]) == 3
        assert metrics["structure_constant"] is True
        assert metrics["exemplar_free"] is True
        rows = read_csv(out / "metrics.csv")
        assert rows[0][:3] == ["phase", "overall_acc", "task1_acc"]
        assert len(rows) == 4
        assert (out / "checkpoints" / "phase2_expanded.npz").exists()

    def test_repeats_use_seed_directories(self, tmp_path, tiny_config):
        assert MainController("WARNING").cmd_train(tiny_config, ["repeats=2", "runtime.save_checkpoints=false"]) == 0
        assert (tmp_path / "out" / "seed0" / "metrics.json").exists()
        assert (tmp_path / "out" / "seed1" / "metrics.json").exists()

    def test_run_log_names_scale(self, tmp_path, tiny_config, caplog):
        caplog.set_level(logging.INFO)
        assert MainController("INFO").cmd_train(tiny_config, ["runtime.save_checkpoints=false"]) == 0
        text = (tmp_path / "out" / "run.log").read_text(encoding="utf-8")
        assert "デスク規模" in text

    def test_missing_config_exit_code(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_invalid_override_exit_code(self, tiny_config):
        assert main(["train", "--config", tiny_config, "--set", "train.sigma=3"]) == 2


class TestFuseCheck:
    def test_expanded_checkpoint_passes(self, tmp_path, tiny_config, capsys):
        controller = MainController("WARNING")
        assert controller.cmd_train(tiny_config) == 0
        checkpoint = tmp_path / "out" / "checkpoints" / "phase2_expanded.npz"
        assert controller.cmd_fusecheck(str(checkpoint), trials=5) == 0
        assert "OK" in capsys.readouterr().out

    def test_unexpanded_checkpoint_rejected(self, tmp_path, tiny_config):
        controller = MainController("WARNING")
        assert controller.cmd_train(tiny_config) == 0
        checkpoint = tmp_path / "out" / "checkpoints" / "phase1.npz"
        assert controller.cmd_fusecheck(str(checkpoint), trials=5) == 1

    def test_missing_checkpoint(self, tmp_path):
        assert main(["fuse-check", "--checkpoint", str(tmp_path / "none.npz"), "--trials", "3"]) == 2


class TestExperiments:
    def test_sigma_sweep_keeps_given_order(self, tmp_path, tiny_config):
        assert MainController("WARNING").cmd_sweep_sigma(tiny_config, [1.0, 0.0]) == 0
        rows = read_csv(tmp_path / "out" / "sigma_sweep.csv")
        assert rows[0] == ["sigma", "avg_inc_acc", "avg_forgetting", "repeats"]
        assert [float(r[0]) for r in rows[1:]] == [1.0, 0.0]

    def test_ablation_rows(self, tmp_path, tiny_config):
        assert MainController("WARNING").cmd_ablate(tiny_config, ["runtime.save_checkpoints=false"]) == 0
        rows = read_csv(tmp_path / "out" / "ablation_summary.csv")
        assert [r[0] for r in rows[1:]] == [name for name, _ in ABLATION_ROWS]
        for name, _ in ABLATION_ROWS:
            assert (tmp_path / "out" / "ablation" / name / "metrics.json").exists()
