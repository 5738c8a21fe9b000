"""
Command line interface.

::

    semharq [--config FILE] [--log-level LEVEL] <command> [options]

Commands: ``gen-data``, ``train --stage N``, ``calibrate``, ``evaluate``,
``sweep`` and ``report``. Exit codes: 0 success, 2 configuration error,
3 checkpoint error, 4 training failure.
"""
import argparse
import logging
import os
import sys

import pandas as pd

from semharq import __version__
from semharq.analyses import CALIBRATION_FILE
from semharq.analyses import SweepAnalysis
from semharq.analyses import build_report
from semharq.analyses import run_calibration
from semharq.analyses import save_calibration
from semharq.config import RunConfig
from semharq.datasets import make_splits
from semharq.datasets import save_raw_images
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError
from semharq.errors import TrainingError
from semharq.training import load_trained
from semharq.training import run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_TRAINING = 4


def gen_data(config, args):
    out = args.out or os.path.join(config.output_dir, "data")
    for role, split in make_splits(config.data).items():
        save_raw_images(split, os.path.join(out, f"{role}.imgs"))


def train(config, args):
    stages = [args.stage] if args.stage else [1, 2, 3, 4]
    for stage in stages:
        run_stage(config, stage)


def calibrate(config, args):
    system, agent = load_trained(config)
    scale, table = run_calibration(config, system, agent, match_agent=args.match_agent)
    save_calibration(os.path.join(config.output_dir, CALIBRATION_FILE), scale, table)


def evaluate(config, args):
    analysis = SweepAnalysis.from_config(
        config, snr_grid=args.snr, policies=args.policy, seeds=config.eval.seeds[:1]
    )
    analysis.sweep_results(print_results=True)
    analysis.export(args.out or os.path.join(config.output_dir, "evaluate"))


def sweep(config, args):
    analysis = SweepAnalysis.from_config(config, policies=args.policy)
    analysis.sweep_results(print_results=not args.quiet)
    out = args.out or config.output_dir
    analysis.export(out)
    analysis.export_to_json(os.path.join(out, "sweep.json"))


def report(config, args):
    directory = args.out or config.output_dir
    path = os.path.join(directory, "summary.csv")
    if not os.path.exists(path):
        raise ConfigurationError(f"No sweep summary at {path}; run 'semharq sweep' first.")
    build_report(pd.read_csv(path), directory, print_results=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="semharq",
        description="Semantic HARQ with joint source-channel-check coding and a learned retransmission agent.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="configuration file overriding the defaults")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="write the generated data splits as raw image files")
    p.add_argument("--out", help="target directory (default <output_dir>/data)")
    p.set_defaults(func=gen_data)

    p = commands.add_parser("train", help="run training stages")
    p.add_argument("--stage", type=int, choices=[1, 2, 3, 4], help="single stage (default: all in order)")
    p.set_defaults(func=train)

    p = commands.add_parser("calibrate", help="calibrate the threshold policy's scale")
    p.add_argument(
        "--match-agent", action="store_true",
        help="match the agent's retransmission ratio per SNR instead of eval.target_retx_ratio",
    )
    p.set_defaults(func=calibrate)

    p = commands.add_parser("evaluate", help="evaluate policies with the first configured seed")
    p.add_argument("--snr", type=float, action="append", help="SNR in dB, repeatable (default: grid)")
    p.add_argument("--policy", action="append", help="policy kind, repeatable (default: eval.policies)")
    p.add_argument("--out", help="result directory (default <output_dir>/evaluate)")
    p.set_defaults(func=evaluate)

    p = commands.add_parser("sweep", help="full sweep over the SNR grid and all seeds")
    p.add_argument("--policy", action="append", help="policy kind, repeatable (default: eval.policies)")
    p.add_argument("--out", help="result directory (default <output_dir>)")
    p.add_argument("--quiet", action="store_true", help="do not print the summary table")
    p.set_defaults(func=sweep)

    p = commands.add_parser("report", help="per-metric pivot tables from a sweep summary")
    p.add_argument("--out", help="directory holding summary.csv (default <output_dir>)")
    p.set_defaults(func=report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s: %(message)s")
    try:
        config = RunConfig.from_file(args.config)
        args.func(config, args)
    except ConfigurationError as e:
        logging.error(str(e))
        return EXIT_CONFIG
    except CheckpointError as e:
        logging.error(str(e))
        return EXIT_CHECKPOINT
    except TrainingError as e:
        logging.error(str(e))
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
