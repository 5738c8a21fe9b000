import json
import os
import shutil

import pandas as pd
import pytest

from semharq import __version__
from semharq.cli import EXIT_CHECKPOINT
from semharq.cli import EXIT_CONFIG
from semharq.cli import EXIT_OK
from semharq.cli import EXIT_TRAINING
from semharq.cli import build_parser
from semharq.cli import main
from semharq.datasets import load_raw_images
from semharq.errors import TrainingDivergence

from conftest import write_config


@pytest.fixture
def trained_copy(trained_run, tmp_path):
    """Configuration file pointing at a private copy of the trained run."""
    config = trained_run[0]
    output_dir = tmp_path / "run"
    shutil.copytree(config.output_dir, output_dir)
    return write_config(tmp_path / "run.cfg", output_dir), output_dir


def test_version(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_command_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_gen_data(tmp_path):
    path = write_config(tmp_path / "run.cfg", tmp_path / "run")
    assert main(["--config", path, "gen-data"]) == EXIT_OK
    for role, size in (("codec_train", 48), ("agent_train", 24), ("test", 40)):
        split = load_raw_images(tmp_path / "run" / "data" / f"{role}.imgs", 1, 4, 4, role=role)
        assert len(split) == size


def test_train_single_stage(tmp_path):
    path = write_config(tmp_path / "run.cfg", tmp_path / "run")
    assert main(["--config", path, "train", "--stage", "1"]) == EXIT_OK
    assert os.path.exists(tmp_path / "run" / "stage1.ckpt")
    assert not os.path.exists(tmp_path / "run" / "stage2.ckpt")


def test_calibrate_sweep_report(trained_copy, capsys):
    path, output_dir = trained_copy
    assert main(["--config", path, "calibrate"]) == EXIT_OK
    with open(output_dir / "calibration.json") as f:
        assert json.load(f)["scale"] > 0.0

    assert main(["--config", path, "sweep", "--quiet", "--policy", "none", "--policy", "threshold"]) == EXIT_OK
    summary = pd.read_csv(output_dir / "summary.csv")
    assert list(pd.unique(summary["policy"])) == ["none", "threshold"]
    assert os.path.exists(output_dir / "sweep.json")
    assert "Sweep Results" not in capsys.readouterr().out

    assert main(["--config", path, "report"]) == EXIT_OK
    assert os.path.exists(output_dir / "report_outage.csv")
    assert "retx_ratio:" in capsys.readouterr().out


def test_calibrate_matching_the_agent(trained_copy):
    path, output_dir = trained_copy
    assert main(["--config", path, "calibrate", "--match-agent"]) == EXIT_OK
    with open(output_dir / "calibration.json") as f:
        assert set(json.load(f)["scale"]) == {"1.0", "13.0"}
    assert main(["--config", path, "evaluate", "--snr", "13", "--policy", "threshold"]) == EXIT_OK


def test_evaluate_off_the_calibrated_grid(trained_copy):
    path, _ = trained_copy
    assert main(["--config", path, "calibrate", "--match-agent"]) == EXIT_OK
    assert main(["--config", path, "evaluate", "--snr", "2.5", "--policy", "threshold"]) == EXIT_CONFIG


def test_evaluate_single_snr(trained_copy, capsys):
    path, output_dir = trained_copy
    assert main(["--config", path, "evaluate", "--snr", "1", "--policy", "oracle", "--policy", "agent"]) == EXIT_OK
    summary = pd.read_csv(output_dir / "evaluate" / "summary.csv")
    assert list(summary["snr_db"]) == [1.0, 1.0]
    assert list(summary["policy"]) == ["oracle", "agent"]
    assert "Retransmission Policy Sweep Results" in capsys.readouterr().out


def test_report_without_sweep(tmp_path):
    path = write_config(tmp_path / "run.cfg", tmp_path / "run")
    assert main(["--config", path, "report"]) == EXIT_CONFIG


def test_configuration_error_exit_code(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[codec]\nwidth = 3\n")
    assert main(["--config", str(path), "gen-data"]) == EXIT_CONFIG


def test_unknown_policy_exit_code(trained_copy):
    path, _ = trained_copy
    assert main(["--config", path, "evaluate", "--policy", "sometimes"]) == EXIT_CONFIG


def test_checkpoint_error_exit_code(tmp_path):
    path = write_config(tmp_path / "run.cfg", tmp_path / "empty")
    assert main(["--config", path, "evaluate"]) == EXIT_CHECKPOINT
    assert main(["--config", path, "train", "--stage", "3"]) == EXIT_CHECKPOINT


def test_training_failure_exit_code(tmp_path, monkeypatch):
    def diverge(config, stage, splits=None):
        raise TrainingDivergence(f"Stage {stage} diverged at step 0: loss nan.", stage, 0)

    monkeypatch.setattr("semharq.cli.run_stage", diverge)
    path = write_config(tmp_path / "run.cfg", tmp_path / "run")
    assert main(["--config", path, "train"]) == EXIT_TRAINING
