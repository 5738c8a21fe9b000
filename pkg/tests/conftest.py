"""
Shared fixtures of the test suite.

The tiny configuration keeps every training stage to a few seconds: 4x4
grey images, K=8 features, k=2 check symbols and 16 hidden units.
"""
import os

import numpy as np
import pytest

from semharq.channel import Channel
from semharq.codec import CodecBundle
from semharq.config import RunConfig
from semharq.datasets import make_splits
from semharq.functions import PerceptualProjector
from semharq.harq.protocol import HarqSystem
from semharq.harq.retx import RetxBundle
from semharq.training import run_stage

TINY = {
    "data": {
        "seed": 11, "channels": 1, "height": 4, "width": 4,
        "codec_train_size": 48, "agent_train_size": 24, "test_size": 40,
    },
    "codec": {
        "feature_dim": 8, "check_dim": 2, "hidden_width": 16, "depth": 2, "perceptual_features": 8,
    },
    "channel": {"kind": "awgn", "snr_db_grid": "1, 13"},
    "train": {
        "seed": 3, "epochs_stage1": 2, "epochs_stage2": 2, "epochs_stage3": 2, "epochs_stage4": 2,
        "batch_size": 16, "lr": 0.001, "log_every": 1,
    },
    "agent": {"hidden": 8, "ppo_epochs": 2, "minibatch": 8, "lr": 0.001},
    "eval": {"ratio": 0.25, "ratio2": 0.25, "seeds": "0"},
}


def tiny_overrides(output_dir, **extra):
    overrides = {f"{section}.{key}": value for section, keys in TINY.items() for key, value in keys.items()}
    overrides["train.output_dir"] = str(output_dir)
    overrides.update(extra)
    return overrides


def write_config(path, output_dir, **extra):
    """Write the tiny configuration as an INI file and return its path."""
    sections = {}
    for dotted, value in tiny_overrides(output_dir, **extra).items():
        section, _, key = dotted.partition(".")
        sections.setdefault(section, {})[key] = value
    with open(path, "w") as f:
        for section, keys in sections.items():
            f.write(f"[{section}]\n")
            for key, value in keys.items():
                f.write(f"{key} = {value}\n")
            f.write("\n")
    return str(path)


@pytest.fixture
def tiny_config(tmp_path):
    """Tiny configuration writing into a fresh temporary directory."""
    return RunConfig.from_file(None, overrides=tiny_overrides(tmp_path / "run"))


@pytest.fixture
def tiny_system():
    """Untrained link of tiny dimensions."""
    shape = (1, 4, 4)
    codec = CodecBundle.build(8, 2, shape, width=16, depth=2, seed=5)
    retx = RetxBundle.build(8, 2, shape, width=16, depth=2, seed=5)
    projector = PerceptualProjector(1, 8, shape)
    return HarqSystem(codec, retx, Channel("awgn"), projector, threshold=0.3)


@pytest.fixture
def tiny_image():
    return np.random.default_rng(0).uniform(0.0, 1.0, 16)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """
    All four stages trained on the tiny configuration.

    Returns
    -------
    tuple
        ``(config, splits, results)`` with the stage results keyed by stage.
    """
    output_dir = tmp_path_factory.mktemp("trained")
    config = RunConfig.from_file(None, overrides=tiny_overrides(output_dir))
    splits = make_splits(config.data)
    results = {stage: run_stage(config, stage, splits) for stage in (1, 2, 3, 4)}
    assert os.path.exists(config.checkpoint_path(4))
    return config, splits, results
