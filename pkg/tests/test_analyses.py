"""
Tests of the policy sweep, threshold calibration and report tables.
"""
import json
import logging
import os

import numpy as np
import pandas as pd
import pytest

from semharq.analyses import CALIBRATION_FILE
from semharq.analyses import REPORT_METRICS
from semharq.analyses import SUMMARY_COLUMNS
from semharq.analyses import SweepAnalysis
from semharq.analyses import build_report
from semharq.analyses import calibrate_threshold_scale
from semharq.analyses import collect_estimates
from semharq.analyses import load_scale
from semharq.analyses import read_records
from semharq.analyses import run_calibration
from semharq.analyses import save_calibration
from semharq.analyses import summarize_records
from semharq.config import RunConfig
from semharq.errors import ConfigurationError
from semharq.policies import AlwaysRetransmit
from semharq.policies import NeverRetransmit
from semharq.policies import RandomPolicy
from semharq.policies import ThresholdPolicy
from semharq.training import load_trained

from conftest import tiny_overrides

POLICIES = ["none", "always", "oracle", "threshold", "agent"]


@pytest.fixture(scope="module")
def sweep(trained_run):
    config, splits, _ = trained_run
    analysis = SweepAnalysis.from_config(config, splits, policies=POLICIES)
    analysis.run()
    return analysis


def test_summary_layout(sweep, trained_run):
    config = trained_run[0]
    summary = sweep.result.summary
    assert tuple(summary.columns) == SUMMARY_COLUMNS
    assert list(pd.unique(summary["policy"])) == POLICIES
    assert len(summary) == len(POLICIES) * len(config.channel.snr_db_grid)
    assert (summary["n"] == config.data.test_size).all()
    assert len(sweep.result.records) == summary["n"].sum()


def test_always_and_never(sweep):
    for snr in sweep.snr_grid:
        always, never = sweep.result.cell("always", snr), sweep.result.cell("none", snr)
        assert always["retx_ratio"] == 1.0
        assert never["retx_ratio"] == 0.0
        assert always["mean_symbols"] > never["mean_symbols"]


def test_oracle_never_worse_than_no_retransmission(sweep):
    for snr in sweep.snr_grid:
        assert sweep.result.cell("oracle", snr)["outage"] <= sweep.result.cell("none", snr)["outage"]


def test_policies_see_the_same_first_round(sweep):
    records = sweep.result.records
    first = records[records["policy"] == "none"]["score_r1"].to_numpy()
    for policy in POLICIES[1:]:
        np.testing.assert_array_equal(records[records["policy"] == policy]["score_r1"].to_numpy(), first)


def test_missing_cell(sweep):
    with pytest.raises(KeyError, match="random"):
        sweep.result.cell("random", 1.0)


def test_export_and_reload(sweep, tmp_path):
    sweep.export(tmp_path)
    for name in ("summary.csv", "records.csv", "summary.json", "records.json"):
        assert os.path.exists(tmp_path / name)
    records = read_records(tmp_path / "records.csv")
    pd.testing.assert_frame_equal(summarize_records(records), sweep.result.summary)
    with open(tmp_path / "records.json") as f:
        rows = json.load(f)
    assert len(rows) == len(sweep.result.records)
    assert rows[0]["score_r2"] is None


def test_rerun_is_byte_identical(sweep, trained_run, tmp_path):
    config, splits, _ = trained_run
    again = SweepAnalysis.from_config(config, splits, policies=POLICIES)
    sweep.export(tmp_path / "a")
    again.export(tmp_path / "b")
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_worker_count_does_not_change_results(tiny_system):
    images = np.random.default_rng(3).uniform(size=(12, 16))
    policies = [NeverRetransmit(), AlwaysRetransmit(), RandomPolicy(probability=0.5)]
    serial = SweepAnalysis(tiny_system, policies, images, [1.0, 13.0], [0, 1], 0.25, 0.5).run()
    threaded = SweepAnalysis(tiny_system, policies, images, [1.0, 13.0], [0, 1], 0.25, 0.5, workers=3).run()
    pd.testing.assert_frame_equal(serial.records, threaded.records)
    pd.testing.assert_frame_equal(serial.summary, threaded.summary)


def test_grid_subset_reproduces_full_sweep_cells(sweep, trained_run):
    config, splits, _ = trained_run
    subset = SweepAnalysis.from_config(config, splits, snr_grid=[13.0], policies=["none"])
    assert subset.snr_index(13.0) == config.channel.snr_db_grid.index(13.0)
    records = subset.run().records
    full = sweep.result.records
    expected = full[(full["policy"] == "none") & (full["snr_db"] == 13.0)]
    np.testing.assert_array_equal(records["final_psnr"].to_numpy(), expected["final_psnr"].to_numpy())


def test_off_grid_snr_gets_its_own_streams(tiny_system):
    analysis = SweepAnalysis(tiny_system, [NeverRetransmit()], np.zeros((40, 16)), [2.5, 13.0], [0],
                             0.25, 0.5, index_grid=[1.0, 13.0])
    assert analysis.snr_index(13.0) == 1
    assert analysis.snr_index(2.5) == 2


def test_uncalibrated_snr_is_rejected_up_front(tiny_system):
    policy = ThresholdPolicy(threshold=0.3, scale={1.0: 0.5, 13.0: 2.0})
    with pytest.raises(ConfigurationError, match="not at 2.5 dB"):
        SweepAnalysis(tiny_system, [policy], np.zeros((40, 16)), [1.0, 2.5], [0], 0.25, 0.5)


def test_seeds_are_pooled(tiny_system):
    images = np.random.default_rng(4).uniform(size=(5, 16))
    result = SweepAnalysis(tiny_system, [NeverRetransmit()], images, [1.0], [0, 1, 2], 0.25, 0.5).run()
    assert len(result.summary) == 1
    assert result.summary["n"].iloc[0] == 15


def test_small_split_warning(tiny_system, caplog):
    with caplog.at_level(logging.WARNING):
        SweepAnalysis(tiny_system, [NeverRetransmit()], np.zeros((5, 16)), [1.0], [0], 0.25, 0.5)
    assert "Only 5 samples" in caplog.text


def test_sweep_validation(tiny_system):
    with pytest.raises(ConfigurationError, match="at least one policy"):
        SweepAnalysis(tiny_system, [], np.zeros((40, 16)), [1.0], [0], 0.25, 0.5)
    with pytest.raises(ConfigurationError, match="SNR grid"):
        SweepAnalysis(tiny_system, [NeverRetransmit()], np.zeros((40, 16)), [], [0], 0.25, 0.5)


def test_unknown_policy_kind(trained_run):
    config, splits, _ = trained_run
    with pytest.raises(ConfigurationError, match="sometimes"):
        SweepAnalysis.from_config(config, splits, policies=["none", "sometimes"])


def test_sweep_table_and_json(sweep, tmp_path, capsys):
    table = sweep.sweep_results(print_results=True)
    assert "Retransmission Policy Sweep Results" in capsys.readouterr().out
    assert table is sweep.result.summary
    path = tmp_path / "sweep.json"
    sweep.export_to_json(path)
    with open(path) as f:
        exported = json.load(f)
    assert exported["settings"]["policies"] == POLICIES
    assert exported["system"]["threshold"] == sweep.system.threshold
    assert len(exported["summary"]) == len(sweep.result.summary)


@pytest.mark.parametrize("target", [0.0, 0.1, 0.5, 1.0])
def test_calibration_reaches_target(target):
    estimates = np.random.default_rng(0).uniform(size=1000)
    result = calibrate_threshold_scale(0.3, target, estimates)
    assert result.attained
    assert abs(result.achieved - target) <= 0.02
    assert result.achieved == np.mean(estimates > 0.3 * result.scale)
    assert result.scale > 0.0


def test_calibration_warns_when_unattainable(caplog):
    with caplog.at_level(logging.WARNING):
        result = calibrate_threshold_scale(0.3, 0.5, np.full(10, 0.4))
    assert not result.attained
    assert result.achieved in (0.0, 1.0)
    assert "not attainable" in caplog.text


@pytest.mark.parametrize("kwargs", [
    {"threshold": 0.0, "target": 0.1, "estimates": [0.1]},
    {"threshold": 0.3, "target": 1.5, "estimates": [0.1]},
    {"threshold": 0.3, "target": 0.1, "estimates": []},
])
def test_calibration_rejects(kwargs):
    with pytest.raises(ValueError):
        calibrate_threshold_scale(**kwargs)


def test_run_calibration(trained_run):
    config, splits, _ = trained_run
    system, agent = load_trained(config)
    scale, table = run_calibration(config, system, agent, splits)
    assert isinstance(scale, float) and scale > 0.0
    assert len(table) == 1 and table["target"].iloc[0] == config.eval.target_retx_ratio

    per_snr, table = run_calibration(config, system, agent, splits, match_agent=True)
    assert set(per_snr) == set(config.channel.snr_db_grid)
    assert len(table) == len(config.channel.snr_db_grid)


def test_estimates_follow_evaluation_streams(trained_run):
    config, splits, _ = trained_run
    system, _ = load_trained(config)
    images = splits["test"].images[:4]
    estimates = collect_estimates(system, images, [1.0, 13.0], config.eval.ratio)
    analysis = SweepAnalysis(system, [NeverRetransmit()], images, [1.0, 13.0], [0],
                             config.eval.ratio, config.eval.ratio)
    records = analysis.run().records
    np.testing.assert_array_equal(records[records["snr_db"] == 13.0]["estimate"].to_numpy(), estimates[13.0])


def test_calibration_file_roundtrip(tmp_path):
    config = RunConfig.from_file(None, overrides=tiny_overrides(tmp_path))
    assert load_scale(config) is None
    path = os.path.join(config.output_dir, CALIBRATION_FILE)
    save_calibration(path, {1.0: 0.5, 13.0: 1.25}, pd.DataFrame({"snr_db": [1.0, 13.0]}))
    assert load_scale(config) == {1.0: 0.5, 13.0: 1.25}
    save_calibration(path, 0.75, pd.DataFrame({"snr_db": ["all"]}))
    assert load_scale(config) == 0.75


def test_report_tables(sweep, tmp_path, capsys):
    tables = build_report(sweep.result.summary, tmp_path, print_results=True)
    assert set(tables) == set(REPORT_METRICS)
    for metric, table in tables.items():
        assert list(table.columns) == POLICIES
        assert list(table.index) == sweep.snr_grid
        assert os.path.exists(tmp_path / f"report_{metric}.csv")
    assert "outage:" in capsys.readouterr().out
    np.testing.assert_array_equal(tables["retx_ratio"]["always"].to_numpy(), 1.0)


def test_report_rejects_mixed_ratios(sweep):
    doubled = pd.concat([sweep.result.summary, sweep.result.summary])
    with pytest.raises(ConfigurationError, match="one compression ratio pair"):
        build_report(doubled, print_results=False)
