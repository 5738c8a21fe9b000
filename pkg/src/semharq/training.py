r"""
Multi-stage training pipeline.

1. Backbone: encoder and joint decoder end to end with an MSE loss; the
   decoder's check-codeword input is fed zeros.
2. Check path: check encoder, joint decoder and quality estimator with the
   information-bottleneck loss under a frozen encoder.
3. Retransmission: the round-two modules with the whole base system frozen;
   every sample is forced through the retransmission.
4. Agent: PPO on the agent-training split with the complete link frozen.

Each stage reads the checkpoint of the previous one from
``train.output_dir`` and writes ``stage<n>.ckpt`` and
``stage<n>_metrics.csv`` (stage 4 writes ``agent_training.csv``).
"""
import logging
import os
from dataclasses import dataclass
from dataclasses import field

import numpy as np
import pandas as pd

from semharq.agent import ActorCritic
from semharq.agent import RolloutBuffer
from semharq.agent import build_state
from semharq.agent import ppo_update
from semharq.autodiff import AdamState
from semharq.autodiff import Tensor
from semharq.autodiff import adam_step
from semharq.autodiff import backward
from semharq.autodiff.checkpoint import checkpoint_digest
from semharq.autodiff.checkpoint import load_checkpoint
from semharq.channel import Channel
from semharq.codec import CodecBundle
from semharq.codec import LossBatch
from semharq.codec import adaptive_mask
from semharq.codec import check_encode
from semharq.codec import encode
from semharq.codec import estimate_quality
from semharq.codec import ib_loss
from semharq.codec import joint_decode
from semharq.codec import power_normalize
from semharq.datasets import make_splits
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError
from semharq.errors import TrainingDivergence
from semharq.errors import TrainingError
from semharq.functions import PerceptualProjector
from semharq.functions import outage
from semharq.functions import perceptual_score_batch
from semharq.functions import percentile_score
from semharq.harq.protocol import HarqSystem
from semharq.harq.protocol import run_transmission
from semharq.harq.retx import RetxBundle
from semharq.harq.retx import refine_features
from semharq.harq.retx import second_check_encode
from semharq.harq.retx import second_estimate
from semharq.harq.retx import second_joint_decode
from semharq.policies import AgentPolicy
from semharq.policies import NeverRetransmit
from semharq.policies import RandomPolicy

BASE = ("enc", "chk", "dec", "est")
RETX = ("enc2", "eo", "chk2", "dec2", "est2")
AGENT = ("actor", "critic")

STAGE_COMPONENTS = {
    1: (("enc", "dec"), ()),
    2: (("chk", "dec", "est"), ("enc",)),
    3: (RETX, BASE),
    4: (AGENT, BASE + RETX),
}

STAGE_LOSSES = {1: "mse", 2: "ib", 3: "ib_retx", 4: "ppo"}


@dataclass
class StageSpec:
    """
    What one training stage trains, freezes and samples.

    ``trainable`` and ``frozen`` are disjoint component keys.
    """

    stage: int
    trainable: tuple
    frozen: tuple
    epochs: int
    batch_size: int
    snr_grid: list
    ratio_range: tuple
    loss: str

    def __post_init__(self):
        if self.stage not in STAGE_COMPONENTS:
            raise ConfigurationError(f"Unknown training stage {self.stage}; stages are 1 to 4.")
        if set(self.trainable) & set(self.frozen):
            raise ConfigurationError(f"Stage {self.stage}: components both trainable and frozen.")

    @classmethod
    def from_config(cls, config, stage):
        if stage not in STAGE_COMPONENTS:
            raise ConfigurationError(f"Unknown training stage {stage}; stages are 1 to 4.")
        trainable, frozen = STAGE_COMPONENTS[stage]
        return cls(
            stage=stage,
            trainable=trainable,
            frozen=frozen,
            epochs=config.train.epochs(stage),
            batch_size=config.train.batch_size,
            snr_grid=list(config.channel.snr_db_grid),
            ratio_range=(config.train.ratio_min, config.train.ratio_max),
            loss=STAGE_LOSSES[stage],
        )


@dataclass
class StageResult:
    """Output of one stage: the trained objects and the per-epoch history."""

    stage: int
    history: pd.DataFrame
    codec: CodecBundle = None
    retx: RetxBundle = None
    agent: ActorCritic = None
    threshold: float = None
    snr_counts: dict = field(default_factory=dict)


def stage_rng(config, stage):
    return np.random.default_rng([config.train.seed, stage])


def make_projector(config):
    """Perceptual projector shared by training and evaluation."""
    return PerceptualProjector(
        config.data.seed, config.codec.perceptual_features, config.data.image_shape
    )


def _sample_conditions(spec, rng):
    snr = float(rng.choice(spec.snr_grid))
    ratio = float(rng.uniform(*spec.ratio_range))
    return snr, ratio


def _check_finite(loss, stage, step):
    value = loss.item()
    if not np.isfinite(value):
        logging.error(f"Stage {stage} diverged at step {step}: loss {value}.")
        raise TrainingDivergence(f"Stage {stage} diverged at step {step}: loss {value}.", stage, step)
    return value


def _check_frozen(stage, before, after):
    if before != after:
        logging.warning(f"Stage {stage}: frozen components changed during training.")
        raise TrainingError(f"Stage {stage} violated its freeze contract.")


def _train_loop(spec, config, images, params, step_fn, rng):
    """
    Shared epoch loop of the supervised stages.

    ``step_fn(batch, snr_db, ratio, rng)`` returns the scalar loss tensor of
    one minibatch.
    """
    state = AdamState(lr=config.train.lr)
    losses = []
    snr_counts = {snr: 0 for snr in spec.snr_grid}
    step = 0
    logging.info(f"Stage {spec.stage}: training {spec.trainable} for {spec.epochs} epochs.")
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(images.shape[0])
        epoch_losses = []
        for start in range(0, images.shape[0], spec.batch_size):
            batch = images[order[start:start + spec.batch_size]]
            snr, ratio = _sample_conditions(spec, rng)
            snr_counts[snr] += 1
            loss = step_fn(batch, snr, ratio, rng)
            epoch_losses.append(_check_finite(loss, spec.stage, step))
            adam_step(params, backward(params, loss), state)
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        if epoch % config.train.log_every == 0 or epoch in (1, spec.epochs):
            logging.info(f"Stage {spec.stage} epoch {epoch}/{spec.epochs}: mean loss {losses[-1]:.6f}.")
    history = pd.DataFrame({"epoch": np.arange(1, spec.epochs + 1), "loss": losses})
    return history, snr_counts


def _transmit_batch(channel, codeword, active, snr, rng, realization=None):
    if realization is None:
        realization = channel.realize(snr, rng, batch=codeword.shape[0])
    return channel.transmit(codeword, realization, rng, active), realization


def stage1_train_backbone(config, splits=None, codec=None):
    """
    Train encoder and joint decoder end to end.

    Per minibatch the SNR is drawn uniformly from the configured grid and R
    uniformly from the configured range. The check path is disabled: the
    decoder's check input is zero.

    Returns
    -------
    StageResult
        With the trained ``codec``.
    """
    spec = StageSpec.from_config(config, 1)
    splits = splits or make_splits(config.data)
    codec = codec or CodecBundle.from_config(config)
    channel = Channel(config.channel.kind)
    images = splits["codec_train"].as_array()
    zero_check = np.zeros((1, codec.k))

    def step(batch, snr, ratio, rng):
        x = encode(codec, batch, ratio, snr)
        masked = adaptive_mask(x, ratio)
        z, _ = power_normalize(masked.values, masked.active_count)
        z_rx, _ = _transmit_batch(channel, z, masked.active_count, snr, rng)
        check = np.repeat(zero_check, batch.shape[0], axis=0)
        reconstruction = joint_decode(codec, z_rx, check, snr)
        return ((reconstruction - batch) ** 2).mean()

    params = codec.parameters(spec.trainable)
    history, counts = _train_loop(spec, config, images, params, step, stage_rng(config, 1))
    return StageResult(1, history, codec=codec, snr_counts=counts)


def stage2_train_check(config, codec, splits=None, projector=None):
    """
    Train check encoder, joint decoder and estimator with the IB loss.

    The encoder is frozen; its parameters are verified bit-identical after
    the stage.

    Returns
    -------
    StageResult
        With the full ``codec``.
    """
    spec = StageSpec.from_config(config, 2)
    splits = splits or make_splits(config.data)
    projector = projector or make_projector(config)
    channel = Channel(config.channel.kind)
    images = splits["codec_train"].as_array()
    gamma = config.codec.gamma
    codec.frozen = set(spec.frozen)

    def step(batch, snr, ratio, rng):
        x = Tensor(encode(codec, batch, ratio, snr).data)
        masked = adaptive_mask(x, ratio)
        z, _ = power_normalize(masked.values, masked.active_count)
        check = check_encode(codec, x, ratio, snr, rng, training=True)
        c, _ = power_normalize(check.sample)
        z_rx, realization = _transmit_batch(channel, z, masked.active_count, snr, rng)
        c_rx, _ = _transmit_batch(channel, c, codec.k, snr, rng, realization)
        reconstruction = joint_decode(codec, z_rx, c_rx, snr)
        estimates = estimate_quality(codec, z_rx, c_rx, snr, ratio)
        scores = perceptual_score_batch(batch, reconstruction.data, projector)
        return ib_loss(LossBatch(batch, reconstruction, scores, estimates, check.mu, check.sigma), gamma)

    frozen_before = checkpoint_digest(codec.state_dict(), [f"{n}." for n in spec.frozen])
    params = codec.parameters(spec.trainable)
    history, counts = _train_loop(spec, config, images, params, step, stage_rng(config, 2))
    _check_frozen(2, frozen_before, checkpoint_digest(codec.state_dict(), [f"{n}." for n in spec.frozen]))
    codec.frozen = set()
    return StageResult(2, history, codec=codec, snr_counts=counts)


def stage3_train_retx(config, codec, splits=None, projector=None, retx=None):
    """
    Train the retransmission modules with the base system frozen.

    Every sample is retransmitted. R2 is drawn independently of R from the
    configured ratio range. The loss is :func:`~semharq.codec.ib_loss` on the
    round-two reconstruction, estimate and check codeword.

    Returns
    -------
    StageResult
        With ``codec`` and the trained ``retx``.
    """
    spec = StageSpec.from_config(config, 3)
    splits = splits or make_splits(config.data)
    projector = projector or make_projector(config)
    channel = Channel(config.channel.kind)
    retx = retx or RetxBundle.from_config(config)
    images = splits["codec_train"].as_array()
    gamma = config.codec.gamma

    def step(batch, snr, ratio, rng):
        ratio2 = float(rng.uniform(*spec.ratio_range))
        x = encode(codec, batch, ratio, snr).data
        masked = adaptive_mask(x, ratio)
        z, _ = power_normalize(masked.values, masked.active_count)
        c, _ = power_normalize(check_encode(codec, x, ratio, snr).sample)
        z_rx, realization = _transmit_batch(channel, z.data, masked.active_count, snr, rng)
        c_rx, _ = _transmit_batch(channel, c.data, codec.k, snr, rng, realization)
        estimate = estimate_quality(codec, z_rx, c_rx, snr, ratio).data

        x_sec = refine_features(retx, x, ratio2, snr)
        masked2 = adaptive_mask(x_sec, ratio2)
        z2, _ = power_normalize(masked2.values, masked2.active_count)
        check2 = second_check_encode(retx, x, x_sec, ratio2, snr, estimate, rng, training=True)
        c2, _ = power_normalize(check2.sample)
        z2_rx, realization2 = _transmit_batch(channel, z2, masked2.active_count, snr, rng)
        c2_rx, _ = _transmit_batch(channel, c2, retx.k, snr, rng, realization2)
        reconstruction2 = second_joint_decode(retx, z_rx, c_rx, z2_rx, c2_rx, snr)
        estimates2 = second_estimate(retx, z_rx, c_rx, z2_rx, c2_rx, snr, ratio2)
        scores2 = perceptual_score_batch(batch, reconstruction2.data, projector)
        return ib_loss(
            LossBatch(batch, reconstruction2, scores2, estimates2, check2.mu, check2.sigma), gamma
        )

    base_before = checkpoint_digest(codec.state_dict())
    params = retx.parameters(spec.trainable)
    history, counts = _train_loop(spec, config, images, params, step, stage_rng(config, 3))
    _check_frozen(3, base_before, checkpoint_digest(codec.state_dict()))
    return StageResult(3, history, codec=codec, retx=retx, snr_counts=counts)


def calibrate_agent_threshold(system, images, snr_grid, ratio, ratio2, quantile, seed):
    """
    Perceptual score threshold from the agent-training split.

    Every image is sent once at every grid SNR without retransmission; the
    threshold is the ``quantile`` order statistic of the round-one scores.
    """
    policy = NeverRetransmit()
    scores = []
    for snr_index, snr in enumerate(snr_grid):
        for i, img in enumerate(images):
            rng = np.random.default_rng([seed, 40, snr_index, i])
            scores.append(run_transmission(system, img, snr, ratio, ratio2, policy, rng, i).score_r1)
    threshold = percentile_score(scores, quantile)
    logging.info(f"Perceptual score threshold at quantile {quantile}: {threshold:.4f}.")
    return threshold


def _rollout(system, images, policy, spec, config, rng, epoch):
    """One pass over the agent split; returns the buffer and the records."""
    buffer = RolloutBuffer()
    records = []
    for i, img in enumerate(images):
        snr = float(rng.choice(spec.snr_grid))
        sample_rng = np.random.default_rng([config.train.seed, 4, epoch, i])
        record = run_transmission(
            system, img, snr, config.eval.ratio, config.eval.ratio2, policy, sample_rng, i
        )
        buffer.add(build_state(record, system.threshold), record.action, record.log_prob,
                   record.reward, record.value, done=1)
        records.append(record)
    return buffer, records


def stage4_train_agent(config, codec, retx, splits=None, projector=None, agent=None, output_dir=None):
    """
    Train the retransmission agent with PPO.

    Each epoch collects one decision per agent-training image with sampled
    actions, computes advantages and runs the clipped PPO update. The entropy
    bonus decays linearly to zero over the stage. A random policy with the
    retransmission probability implied by the threshold quantile is logged
    once for comparison.

    Returns
    -------
    StageResult
        With ``agent``, ``threshold`` and the learning curve
        (``epoch, mean_reward, retx_ratio, outage``) as ``history``.
    """
    spec = StageSpec.from_config(config, 4)
    splits = splits or make_splits(config.data)
    projector = projector or make_projector(config)
    rng = stage_rng(config, 4)
    channel = Channel(config.channel.kind)
    agent = agent or ActorCritic.build(codec.k, config.agent.hidden, seed=config.train.seed)
    images = splits["agent_train"].images

    system = HarqSystem(codec, retx, channel, projector, threshold=0.0)
    system.threshold = calibrate_agent_threshold(
        system, images, spec.snr_grid, config.eval.ratio, config.eval.ratio2,
        config.agent.threshold_percentile, config.train.seed,
    )
    frozen_before = checkpoint_digest({**codec.state_dict(), **retx.state_dict()})

    baseline = RandomPolicy(probability=1.0 - config.agent.threshold_percentile)
    _, baseline_records = _rollout(system, images, baseline, spec, config, rng, epoch=0)
    logging.info(
        f"Random baseline (p={baseline.probability:.2f}): mean reward "
        f"{np.mean([r.reward for r in baseline_records]):.4f}, outage "
        f"{outage([r.final_score for r in baseline_records], system.threshold):.4f}."
    )

    optimizer = AdamState(lr=config.agent.lr)
    policy = AgentPolicy(network=agent, mode="sample")
    rows = []
    logging.info(f"Stage 4: training the agent for {spec.epochs} epochs on {len(images)} samples.")
    for epoch in range(1, spec.epochs + 1):
        buffer, records = _rollout(system, images, policy, spec, config, rng, epoch)
        buffer.finish(config.agent.gamma, config.agent.lam)
        decay = 1.0 - (epoch - 1) / max(spec.epochs - 1, 1)
        losses = ppo_update(
            agent, buffer, config.agent.clip_eps, config.agent.ppo_epochs, config.agent.minibatch,
            optimizer, rng, entropy_coef=config.agent.entropy_coef * decay,
            value_coef=config.agent.value_coef, dump_dir=output_dir,
        )
        if not np.isfinite(losses.total):
            raise TrainingDivergence(f"Stage 4 diverged at epoch {epoch}.", 4, epoch)
        rows.append({
            "epoch": epoch,
            "mean_reward": float(np.mean(buffer.rewards)),
            "retx_ratio": float(np.mean(buffer.actions)),
            "outage": outage([r.final_score for r in records], system.threshold),
        })
        if epoch % config.train.log_every == 0 or epoch in (1, spec.epochs):
            logging.info(
                f"Stage 4 epoch {epoch}/{spec.epochs}: mean reward {rows[-1]['mean_reward']:.4f}, "
                f"retx ratio {rows[-1]['retx_ratio']:.3f}, outage {rows[-1]['outage']:.4f}."
            )
    _check_frozen(4, frozen_before, checkpoint_digest({**codec.state_dict(), **retx.state_dict()}))
    return StageResult(4, pd.DataFrame(rows), codec=codec, retx=retx, agent=agent,
                       threshold=system.threshold)


def _require(path, who):
    if not os.path.exists(path):
        logging.error(f"{who} needs the checkpoint {path}.")
        raise CheckpointError(f"{who} needs the checkpoint {path}; run the previous stage first.")
    return load_checkpoint(path)


def load_codec(config, state):
    codec = CodecBundle.from_config(config)
    codec.load_state_dict(state)
    return codec


def load_retx(config, state):
    retx = RetxBundle.from_config(config)
    retx.load_state_dict(state)
    return retx


def run_stage(config, stage, splits=None):
    """
    Run one stage from the previous stage's checkpoint and persist the result.

    Parameters
    ----------
    config : RunConfig
        Run configuration; checkpoints live in ``config.train.output_dir``.
    stage : int
        Stage number, 1 to 4.

    Returns
    -------
    StageResult
    """
    if stage not in STAGE_COMPONENTS:
        raise ConfigurationError(f"Unknown training stage {stage}; stages are 1 to 4.")
    out = config.train.output_dir
    os.makedirs(out, exist_ok=True)
    splits = splits or make_splits(config.data)
    projector = make_projector(config)

    if stage == 1:
        result = stage1_train_backbone(config, splits)
        result.codec.save(config.checkpoint_path(1))
    elif stage == 2:
        codec = load_codec(config, _require(config.checkpoint_path(1), "Stage 2"))
        result = stage2_train_check(config, codec, splits, projector)
        result.codec.save(config.checkpoint_path(2))
    elif stage == 3:
        codec = load_codec(config, _require(config.checkpoint_path(2), "Stage 3"))
        result = stage3_train_retx(config, codec, splits, projector)
        result.codec.save(config.checkpoint_path(3), extra=result.retx.state_dict())
    else:
        state = _require(config.checkpoint_path(3), "Stage 4")
        result = stage4_train_agent(
            config, load_codec(config, state), load_retx(config, state), splits, projector, output_dir=out
        )
        result.agent.save(config.checkpoint_path(4), extra={"meta.threshold": np.array([result.threshold])})

    name = "agent_training.csv" if stage == 4 else f"stage{stage}_metrics.csv"
    result.history.to_csv(os.path.join(out, name), index=False)
    config.export_to_json(os.path.join(out, "config.json"))
    logging.info(f"Stage {stage} finished; outputs in {out}.")
    return result


def load_trained(config):
    """
    Load the trained link and agent from ``config.train.output_dir``.

    Returns
    -------
    tuple
        ``(system, agent)`` where ``system`` is a
        :class:`~semharq.harq.protocol.HarqSystem` with the stored threshold.

    Raises
    ------
    CheckpointError
        If a checkpoint is missing or does not match the configuration.
    """
    base = _require(config.checkpoint_path(3), "Evaluation")
    agent_state = _require(config.checkpoint_path(4), "Evaluation")
    if "meta.threshold" not in agent_state:
        raise CheckpointError(f"{config.checkpoint_path(4)} holds no threshold.")
    agent = ActorCritic.build(config.codec.check_dim, config.agent.hidden)
    agent.load_state_dict(agent_state)
    system = HarqSystem(
        load_codec(config, base), load_retx(config, base), Channel(config.channel.kind),
        make_projector(config), float(agent_state["meta.threshold"][0]),
    )
    return system, agent
