import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tabulate import tabulate

from semharq.datasets import make_splits
from semharq.errors import ConfigurationError
from semharq.functions import outage
from semharq.functions import percentile_psnr
from semharq.functions import percentile_score
from semharq.harq.protocol import RECORD_COLUMNS
from semharq.harq.protocol import run_transmission
from semharq.policies import AgentPolicy
from semharq.policies import NeverRetransmit
from semharq.policies import make_policy
from semharq.training import load_trained

SUMMARY_COLUMNS = (
    "policy", "snr_db", "R", "R2", "n", "mean_psnr", "p97_psnr", "mean_score",
    "p97_score", "outage", "retx_ratio", "mean_symbols",
)
REPORT_METRICS = ("mean_psnr", "p97_psnr", "mean_score", "p97_score", "outage", "retx_ratio")
TAIL_QUANTILE = 0.97
# below this many samples the 97th percentile is the sample minimum
MIN_TAIL_SAMPLES = 34
CALIBRATION_FILE = "calibration.json"


def sample_rng(seed, snr_index, sample_index):
    """Per-sample stream; independent of the policy so policies share channel draws."""
    return np.random.default_rng([seed, snr_index, sample_index])


def summarize_records(records):
    """
    Aggregate per-sample records into one summary row per cell.

    Cells are ``(policy, snr_db, R, R2)``; seeds are pooled. Policies keep
    their order of appearance, SNRs are ascending.

    Parameters
    ----------
    records : pandas.DataFrame
        Rows as produced by :meth:`TransmissionRecord.to_row`.

    Returns
    -------
    pandas.DataFrame
        Columns as in ``SUMMARY_COLUMNS``.
    """
    rows = []
    policy_order = {p: i for i, p in enumerate(pd.unique(records["policy"]))}
    for (policy, snr, ratio, ratio2), cell in records.groupby(["policy", "snr_db", "R", "R2"], sort=False):
        rows.append({
            "policy": policy,
            "snr_db": snr,
            "R": ratio,
            "R2": ratio2,
            "n": len(cell),
            "mean_psnr": float(cell["final_psnr"].mean()),
            "p97_psnr": percentile_psnr(cell["final_psnr"], TAIL_QUANTILE),
            "mean_score": float(cell["final_score"].mean()),
            "p97_score": percentile_score(cell["final_score"], TAIL_QUANTILE),
            "outage": outage(cell["final_score"], cell["threshold"].iloc[0]),
            "retx_ratio": float(cell["action"].mean()),
            "mean_symbols": float(cell["symbols_sent"].mean()),
        })
    summary = pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))
    summary["order"] = summary["policy"].map(policy_order)
    summary = summary.sort_values(["order", "snr_db", "R", "R2"], kind="stable").drop(columns="order")
    return summary.reset_index(drop=True)


def _run_cell(system, policy, images, snr_index, snr_db, seed, ratio, ratio2):
    rows = []
    for i, img in enumerate(images):
        record = run_transmission(
            system, img, snr_db, ratio, ratio2, policy, sample_rng(seed, snr_index, i),
            sample_id=i, seed=seed,
        )
        rows.append(record.to_row())
    logging.info(f"Cell done: policy {policy.label}, {snr_db} dB, seed {seed}, n={len(rows)}.")
    return rows


@dataclass
class SweepResult:
    """Outcome of a sweep: per-sample ``records`` and the aggregated ``summary``."""

    records: pd.DataFrame
    summary: pd.DataFrame

    def cell(self, policy, snr_db):
        """Summary row of one ``(policy, snr_db)`` cell as a Series."""
        match = self.summary[(self.summary["policy"] == policy) & (self.summary["snr_db"] == float(snr_db))]
        if match.empty:
            raise KeyError(f"No summary row for policy '{policy}' at {snr_db} dB.")
        return match.iloc[0]


class SweepAnalysis:
    """
    Evaluation of retransmission policies over an SNR grid.

    Every ``(policy, snr, seed)`` cell transmits the whole evaluation split
    once. Cells are independent jobs on a thread pool; each sample draws from
    its own stream keyed by seed, SNR index and sample index, and the
    records are gathered in cell order, so the result does not depend on the
    number of workers.

    Parameters
    ----------
    system : semharq.harq.protocol.HarqSystem
        Trained link with its perceptual score threshold.
    policies : list of semharq.policies.Policy
        Policies to compare.
    images : sequence of Image
        Evaluation split.
    snr_grid : list of float
        Channel SNRs in dB.
    seeds : list of int
        Evaluation seeds.
    ratio, ratio2 : float
        Compression ratios of the two rounds.
    workers : int, optional
        Thread pool size (default 1).
    index_grid : list of float, optional
        Grid that numbers the per-sample streams (default ``snr_grid``). An
        SNR on this grid uses its position there, so sweeps over a subset of
        the grid reproduce the full sweep's cells.

    Attributes
    ----------
    result : SweepResult
        Set by :meth:`run`.
    """

    def __init__(self, system, policies, images, snr_grid, seeds, ratio, ratio2, workers=1, index_grid=None):
        if not policies:
            raise ConfigurationError("A sweep needs at least one policy.")
        if not snr_grid or not seeds:
            raise ConfigurationError("A sweep needs a non-empty SNR grid and seed list.")
        self.system = system
        self.policies = list(policies)
        self.images = list(images)
        self.snr_grid = [float(s) for s in snr_grid]
        self.seeds = [int(s) for s in seeds]
        self.ratio = float(ratio)
        self.ratio2 = float(ratio2)
        self.workers = int(workers)
        self.index_grid = [float(s) for s in (index_grid or self.snr_grid)]
        self.result = None

        for policy in self.policies:
            if hasattr(policy, "scale_at"):
                for snr in self.snr_grid:
                    policy.scale_at(snr)

        n = len(self.images) * len(self.seeds)
        if n < MIN_TAIL_SAMPLES:
            logging.warning(
                f"Only {n} samples per cell; the 97th percentile degenerates to the sample extreme."
            )

    @classmethod
    def from_config(cls, config, splits=None, snr_grid=None, policies=None, seeds=None):
        """
        Create a sweep from the trained checkpoints of a run.

        The threshold policy uses the scale stored by :func:`run_calibration`
        in the output directory; without it the scale is calibrated on the
        fly against ``eval.target_retx_ratio``.

        Parameters
        ----------
        config : RunConfig
            Run configuration.
        splits : dict, optional
            Data splits, generated from ``config.data`` if omitted.
        snr_grid, policies, seeds : list, optional
            Override the configured values.

        Returns
        -------
        SweepAnalysis
        """
        splits = splits or make_splits(config.data)
        system, agent = load_trained(config)
        snr_grid = snr_grid or config.channel.snr_db_grid
        kinds = policies or config.eval.policies
        built = []
        for kind in kinds:
            if kind == "agent":
                built.append(AgentPolicy(network=agent, mode="greedy"))
            elif kind == "threshold":
                scale = load_scale(config)
                if scale is None:
                    logging.info("No stored threshold calibration; calibrating now.")
                    scale, _ = run_calibration(config, system, agent, splits)
                built.append(make_policy("threshold", threshold=system.threshold, scale=scale))
            else:
                try:
                    built.append(make_policy(kind))
                except KeyError as e:
                    raise ConfigurationError(str(e)) from e
        return cls(
            system, built, splits["test"].images, snr_grid, seeds or config.eval.seeds,
            config.eval.ratio, config.eval.ratio2, config.eval.workers,
            index_grid=config.channel.snr_db_grid,
        )

    def snr_index(self, snr_db):
        """Stream index of an SNR: its grid position, or past the grid when off it."""
        if snr_db in self.index_grid:
            return self.index_grid.index(snr_db)
        return len(self.index_grid) + self.snr_grid.index(snr_db)

    def _cells(self):
        for policy in self.policies:
            for snr in self.snr_grid:
                for seed in self.seeds:
                    yield policy, self.snr_index(snr), snr, seed

    def run(self):
        """
        Transmit the split in every cell and aggregate.

        Returns
        -------
        SweepResult
        """
        cells = list(self._cells())
        logging.info(
            f"Sweep: {len(self.policies)} policies x {len(self.snr_grid)} SNRs x "
            f"{len(self.seeds)} seeds on {len(self.images)} samples, {self.workers} worker(s)."
        )

        def job(cell):
            policy, snr_index, snr, seed = cell
            return _run_cell(self.system, policy, self.images, snr_index, snr, seed, self.ratio, self.ratio2)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            chunks = list(pool.map(job, cells))
        records = pd.DataFrame([row for chunk in chunks for row in chunk], columns=list(RECORD_COLUMNS))
        self.result = SweepResult(records, summarize_records(records))
        return self.result

    def sweep_results(self, print_results=True):
        """
        Summary table of the sweep.

        Parameters
        ----------
        print_results : bool, optional
            If True, prints the table in the console (default is True).

        Returns
        -------
        pandas.DataFrame
        """
        if self.result is None:
            self.run()
        summary = self.result.summary
        if print_results:
            print("\nRetransmission Policy Sweep Results:")
            print(tabulate(summary.reset_index(drop=True), headers="keys", tablefmt="psql", floatfmt=".3f"))
        return summary

    def export(self, output_dir):
        """Write ``summary.csv``, ``records.csv`` and their JSON mirrors to ``output_dir``."""
        if self.result is None:
            self.run()
        os.makedirs(output_dir, exist_ok=True)
        self.result.summary.to_csv(os.path.join(output_dir, "summary.csv"), index=False)
        self.result.records.to_csv(os.path.join(output_dir, "records.csv"), index=False)
        for name in ("summary", "records"):
            table = getattr(self.result, name)
            with open(os.path.join(output_dir, f"{name}.json"), "w") as json_file:
                json.dump(_records_json(table), json_file, indent=4)
        logging.info(f"Sweep results written to {output_dir}.")

    def export_to_json(self, output_path):
        """
        Export the sweep setting and its summary to a JSON file.

        Parameters
        ----------
        output_path : str
            Path where the JSON file will be saved.
        """
        data = self._serialize()
        with open(output_path, "w") as json_file:
            json.dump(data, json_file, indent=4)
            logging.info(f"Sweep exported to JSON file: {output_path}.")

    def _serialize(self):
        export = {}
        export["system"] = {
            "K": self.system.codec.K,
            "k": self.system.codec.k,
            "channel": self.system.channel.kind,
            "threshold": self.system.threshold,
        }
        export["settings"] = {
            "policies": [p.label for p in self.policies],
            "snr_db_grid": self.snr_grid,
            "seeds": self.seeds,
            "R": self.ratio,
            "R2": self.ratio2,
            "samples": len(self.images),
        }
        export["summary"] = _records_json(self.result.summary) if self.result is not None else []
        return export


def _records_json(table):
    """Table rows as JSON-ready dicts with NaN written as null."""
    return json.loads(table.to_json(orient="records", double_precision=15))


def read_records(path):
    """Read ``records.csv`` back without losing float precision."""
    return pd.read_csv(path, float_precision="round_trip")


@dataclass
class CalibrationResult:
    """
    Outcome of a threshold-scale bisection.

    ``attained`` is False when no scale reaches the target within the
    tolerance; ``scale`` is then the closest one found.
    """

    scale: float
    achieved: float
    target: float
    attained: bool
    iterations: int


def calibrate_threshold_scale(threshold, target, estimates, tol=0.02, max_iter=40):
    r"""
    Bisect the multiplicative threshold scale to a target retransmission ratio.

    The ratio :math:`\frac{1}{N}\sum 1[\hat{s}_i > \theta \cdot s]` does not
    increase with the scale :math:`s`.

    Parameters
    ----------
    threshold : float
        Perceptual score threshold, strictly positive.
    target : float
        Target retransmission ratio in :math:`[0, 1]`.
    estimates : array_like
        Round-one quality estimates of a validation split.
    tol : float, optional
        Accepted deviation from ``target`` (default 0.02).
    max_iter : int, optional
        Bisection steps (default 40).

    Returns
    -------
    CalibrationResult

    Examples
    --------
    >>> calibrate_threshold_scale(0.5, 0.0, [0.1, 0.2, 0.4]).achieved
    0.0
    >>> calibrate_threshold_scale(0.5, 1.0, [0.1, 0.2, 0.4]).achieved
    1.0
    """
    estimates = np.asarray(estimates, dtype=np.float64).reshape(-1)
    if estimates.size == 0:
        raise ValueError("Calibration needs at least one estimate.")
    if threshold <= 0:
        raise ValueError(f"Calibration needs a positive threshold, got {threshold}.")
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"Target retransmission ratio must lie in [0, 1], got {target}.")

    def ratio(scale):
        return float(np.mean(estimates > threshold * scale))

    lo = 1e-12
    hi = 2.0 * max(float(estimates.max()) / threshold, 1.0)
    best = min(((abs(ratio(s) - target), s) for s in (hi, lo)))
    iterations = 0
    while best[0] > tol and iterations < max_iter:
        iterations += 1
        mid = 0.5 * (lo + hi)
        achieved = ratio(mid)
        best = min(best, (abs(achieved - target), mid))
        if achieved > target:
            lo = mid
        else:
            hi = mid

    error, scale = best
    result = CalibrationResult(scale, ratio(scale), float(target), error <= tol, iterations)
    if not result.attained:
        logging.warning(
            f"Retransmission ratio {target:.3f} not attainable; closest is {result.achieved:.3f} "
            f"at scale {scale:.4g}."
        )
    return result


def collect_estimates(system, images, snr_grid, ratio, seed=0):
    """
    Round-one quality estimates per SNR.

    Uses the evaluation streams, so the estimates are those the policies
    see during a sweep with the same seed.

    Returns
    -------
    dict
        ``{snr_db: numpy.ndarray}``.
    """
    policy = NeverRetransmit()
    estimates = {}
    for snr_index, snr in enumerate(snr_grid):
        estimates[float(snr)] = np.array([
            run_transmission(system, img, snr, ratio, ratio, policy, sample_rng(seed, snr_index, i), i).estimate
            for i, img in enumerate(images)
        ])
    return estimates


def agent_retx_ratios(system, agent, images, snr_grid, ratio, ratio2, seed=0):
    """Retransmission ratio of the greedy agent at every SNR."""
    policy = AgentPolicy(network=agent, mode="greedy")
    ratios = {}
    for snr_index, snr in enumerate(snr_grid):
        actions = [
            run_transmission(system, img, snr, ratio, ratio2, policy, sample_rng(seed, snr_index, i), i).action
            for i, img in enumerate(images)
        ]
        ratios[float(snr)] = float(np.mean(actions))
    return ratios


def run_calibration(config, system, agent, splits=None, match_agent=False):
    """
    Calibrate the threshold policy's scale on the agent-training split.

    Parameters
    ----------
    config : RunConfig
        Run configuration.
    system : HarqSystem
        Trained link.
    agent : ActorCritic
        Trained agent, needed with ``match_agent``.
    match_agent : bool, optional
        If True, calibrate one scale per SNR to the agent's retransmission
        ratio at that SNR; otherwise one scale for the whole grid against
        ``eval.target_retx_ratio``.

    Returns
    -------
    tuple
        ``(scale, table)``: a float or ``{snr_db: scale}``, and a DataFrame
        with one row per calibration.
    """
    splits = splits or make_splits(config.data)
    images = splits["agent_train"].images
    grid = config.channel.snr_db_grid
    seed = config.eval.seeds[0]
    estimates = collect_estimates(system, images, grid, config.eval.ratio, seed)

    if match_agent:
        targets = agent_retx_ratios(system, agent, images, grid, config.eval.ratio, config.eval.ratio2, seed)
        results = {
            snr: calibrate_threshold_scale(system.threshold, targets[snr], estimates[snr]) for snr in estimates
        }
        scale = {snr: r.scale for snr, r in results.items()}
    else:
        pooled = np.concatenate(list(estimates.values()))
        results = {"all": calibrate_threshold_scale(system.threshold, config.eval.target_retx_ratio, pooled)}
        scale = results["all"].scale
    table = pd.DataFrame([{"snr_db": snr, **asdict(r)} for snr, r in results.items()])
    for snr, r in results.items():
        logging.info(
            f"Threshold scale at {snr}: {r.scale:.4g} (ratio {r.achieved:.3f}, target {r.target:.3f})."
        )
    return scale, table


def save_calibration(path, scale, table):
    """Store a calibrated scale with its calibration table as JSON."""
    data = {
        "scale": {str(k): v for k, v in scale.items()} if isinstance(scale, dict) else scale,
        "calibration": _records_json(table),
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as json_file:
        json.dump(data, json_file, indent=4)
        logging.info(f"Threshold calibration exported to JSON file: {path}.")


def load_scale(config):
    """Stored threshold scale of the run, or None if it was never calibrated."""
    path = os.path.join(config.output_dir, CALIBRATION_FILE)
    if not os.path.exists(path):
        return None
    with open(path) as json_file:
        scale = json.load(json_file)["scale"]
    if isinstance(scale, dict):
        return {float(k): float(v) for k, v in scale.items()}
    return float(scale)


def build_report(summary, output_dir=None, print_results=True):
    """
    Pivot the summary into one table per metric.

    Rows are SNRs, columns are policies in sweep order. With ``output_dir``
    each table is written to ``report_<metric>.csv``.

    Returns
    -------
    dict
        ``{metric: pandas.DataFrame}``.
    """
    if summary[["policy", "snr_db"]].duplicated().any():
        raise ConfigurationError("Report needs one compression ratio pair per sweep.")
    policies = list(pd.unique(summary["policy"]))
    tables = {}
    for metric in REPORT_METRICS:
        table = summary.pivot(index="snr_db", columns="policy", values=metric)[policies]
        table.columns.name = None
        tables[metric] = table
        if output_dir is not None:
            os.makedirs(output_dir, exist_ok=True)
            table.to_csv(os.path.join(output_dir, f"report_{metric}.csv"))
        if print_results:
            print(f"\n{metric}:")
            print(tabulate(table, headers="keys", tablefmt="psql", floatfmt=".3f"))
    if output_dir is not None:
        logging.info(f"Report tables written to {output_dir}.")
    return tables
