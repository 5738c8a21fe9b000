"""
Tests of the retransmission agent: state, reward table, advantage
estimation, PPO losses and the actor-critic network.
"""
import itertools
import os
from types import SimpleNamespace

import numpy as np
import pytest

from semharq.agent import ActorCritic
from semharq.agent import RolloutBuffer
from semharq.agent import act
from semharq.agent import build_state
from semharq.agent import clipped_surrogate
from semharq.agent import critic_loss
from semharq.agent import gae
from semharq.agent import ppo_update
from semharq.agent import reward
from semharq.agent.state import stack_groups
from semharq.autodiff import AdamState
from semharq.autodiff import Tensor
from semharq.autodiff import adam_step
from semharq.autodiff import backward
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError
from semharq.errors import ContractError
from semharq.errors import TrainingError
from semharq.harq.protocol import run_transmission
from semharq.policies import NeverRetransmit


def make_state(rng, k=2):
    record = SimpleNamespace(
        snr_db=float(rng.choice([1.0, 13.0])), ratio=0.25, estimate=float(rng.uniform()),
        check_received=rng.standard_normal(k),
    )
    return build_state(record, 0.4)


def filled_buffer(rng, n=32):
    buffer = RolloutBuffer()
    for _ in range(n):
        state = make_state(rng)
        buffer.add(state, int(rng.integers(0, 2)), np.log(0.5), float(rng.choice([10, 0.5, -5])), 0.0)
    return buffer


def test_reward_table_is_total_and_exclusive():
    threshold = 0.3
    below, above = 0.1, 0.5
    outcomes = {}
    for s1, action, s2 in itertools.product((below, above), (0, 1), (below, above)):
        outcomes[(s1, action, s2)] = reward(s1, s2 if action else None, action, threshold)
    assert outcomes[(above, 1, below)] == 10.0
    assert outcomes[(below, 0, below)] == outcomes[(below, 0, above)] == 0.5
    assert outcomes[(above, 1, above)] == -0.5
    assert outcomes[(above, 0, below)] == outcomes[(above, 0, above)] == -5.0
    assert outcomes[(below, 1, below)] == outcomes[(below, 1, above)] == -1.0
    assert set(outcomes.values()) == {10.0, 0.5, -0.5, -5.0, -1.0}


def test_reward_threshold_boundary():
    assert reward(0.3, None, 0, 0.3) == 0.5
    assert reward(0.31, 0.3, 1, 0.3) == 10.0


def test_reward_contract():
    with pytest.raises(ContractError, match="post-retransmission"):
        reward(0.5, None, 1, 0.3)
    with pytest.raises(ContractError, match="Action"):
        reward(0.5, 0.1, 2, 0.3)


def test_state_groups():
    rng = np.random.default_rng(0)
    state = make_state(rng)
    groups = state.groups()
    assert groups["channel"].shape == (2,)
    assert groups["quality"][2] == pytest.approx(state.estimate - 0.4)
    assert groups["codeword"].shape == (2,)
    stacked = stack_groups([state, make_state(rng)])
    assert stacked["quality"].shape == (2, 3)


def test_gae_collapses_for_single_step_episodes():
    rng = np.random.default_rng(1)
    buffer = RolloutBuffer()
    rewards, values = rng.normal(size=1000), rng.normal(size=1000)
    for r, v in zip(rewards, values):
        buffer.add(None, 0, 0.0, r, v, done=1)
    advantages, returns = gae(buffer, gamma=0.99, lam=0.95)
    np.testing.assert_allclose(advantages, rewards - values, rtol=0, atol=1e-12)
    np.testing.assert_allclose(returns, rewards, rtol=0, atol=1e-12)


def test_gae_matches_hand_unrolled_recursion():
    gamma, lam = 0.9, 0.8
    rewards = [1.0, -2.0, 0.5, 3.0, 1.5]
    values = [0.2, -0.1, 0.4, 0.0, 0.3]
    dones = [0, 0, 1, 0, 0]
    last_value = 0.7
    buffer = RolloutBuffer()
    for r, v, d in zip(rewards, values, dones):
        buffer.add(None, 0, 0.0, r, v, done=d)
    advantages, returns = gae(buffer, gamma, lam, last_value)

    d4 = rewards[4] + gamma * last_value - values[4]
    d3 = rewards[3] + gamma * values[4] - values[3]
    d2 = rewards[2] - values[2]
    d1 = rewards[1] + gamma * values[2] - values[1]
    d0 = rewards[0] + gamma * values[1] - values[0]
    a4 = d4
    a3 = d3 + gamma * lam * a4
    a2 = d2
    a1 = d1 + gamma * lam * a2
    a0 = d0 + gamma * lam * a1
    np.testing.assert_allclose(advantages, [a0, a1, a2, a3, a4], rtol=0, atol=1e-10)
    np.testing.assert_allclose(returns, np.array([a0, a1, a2, a3, a4]) + values, rtol=0, atol=1e-10)


def test_state_reads_the_received_check_codeword(tiny_system, tiny_image):
    record = run_transmission(tiny_system, tiny_image, 1.0, 0.25, 0.25, NeverRetransmit(),
                              np.random.default_rng(0))
    assert not np.array_equal(record.check_sent, record.check_received)
    codeword = build_state(record, 0.3).groups()["codeword"]
    np.testing.assert_array_equal(codeword, record.check_received)

    injected = SimpleNamespace(snr_db=1.0, ratio=0.25, estimate=0.2,
                               check_sent=np.array([9.0, 9.0]), check_received=np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(build_state(injected, 0.3).check_codeword, [-1.0, 2.0])


def test_clipped_surrogate():
    advantages = np.array([1.0, -2.0])
    same = clipped_surrogate(np.zeros(2), np.zeros(2), advantages, 0.2)
    assert same.item() == pytest.approx(-np.mean(advantages))
    # ratio e > 1.2 with a positive advantage is clipped
    clipped = clipped_surrogate(np.array([1.0]), np.array([0.0]), np.array([1.0]), 0.2)
    assert clipped.item() == pytest.approx(-1.2)
    # a negative advantage keeps the pessimistic unclipped term
    pessimistic = clipped_surrogate(np.array([1.0]), np.array([0.0]), np.array([-1.0]), 0.2)
    assert pessimistic.item() == pytest.approx(np.e)


@pytest.mark.parametrize("log_prob_new, advantage", [(1.0, 1.0), (-1.0, -1.0)])
def test_clipped_surrogate_has_no_gradient_outside_the_band(log_prob_new, advantage):
    new = Tensor(np.array([log_prob_new]), requires_grad=True)
    clipped_surrogate(new, np.zeros(1), np.array([advantage]), 0.2).backward()
    assert new.grad[0] == 0.0

    inside = Tensor(np.array([0.1]), requires_grad=True)
    clipped_surrogate(inside, np.zeros(1), np.array([advantage]), 0.2).backward()
    assert inside.grad[0] == pytest.approx(-advantage * np.exp(0.1))


def test_critic_loss_decreases_under_adam():
    rng = np.random.default_rng(2)
    ac = ActorCritic.build(2, hidden=8, seed=0)
    groups = stack_groups([make_state(rng) for _ in range(16)])
    returns = rng.choice([10.0, 0.5, -5.0], size=16)
    state = AdamState(lr=1e-3)
    start = critic_loss(ac, groups, returns).item()
    params = ac.parameters()
    for _ in range(100):
        adam_step(params, backward(params, critic_loss(ac, groups, returns)), state)
    assert critic_loss(ac, groups, returns).item() < start


def test_act_modes():
    rng = np.random.default_rng(3)
    ac = ActorCritic.build(2, hidden=8, seed=1)
    state = make_state(rng)
    greedy = [act(ac, state, "greedy") for _ in range(3)]
    assert greedy[0] == greedy[1] == greedy[2]
    action, log_prob, value = act(ac, state, "sample", np.random.default_rng(0))
    assert action in (0, 1) and log_prob <= 0.0 and np.isfinite(value)
    with pytest.raises(ConfigurationError, match="rng"):
        act(ac, state, "sample")
    with pytest.raises(ConfigurationError, match="mode"):
        act(ac, state, "softmax")


def logits_of(ac, state):
    return ac.forward({k: v.reshape(1, -1) for k, v in state.groups().items()})[0].data[0]


def test_act_log_prob_matches_softmax():
    rng = np.random.default_rng(8)
    ac = ActorCritic.build(2, hidden=8, seed=3)
    for _ in range(20):
        state = make_state(rng)
        logits = logits_of(ac, state)
        probs = np.exp(logits) / np.exp(logits).sum()
        for mode in ("greedy", "sample"):
            action, log_prob, _ = act(ac, state, mode, rng)
            assert abs(np.exp(log_prob) - probs[action]) <= 1e-9


def set_logits(ac, logits):
    last = ac.actor_head.layers[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.array(logits, dtype=np.float64)


def test_symmetric_logits_sample_both_actions_evenly():
    rng = np.random.default_rng(9)
    ac = ActorCritic.build(2, hidden=8, seed=3)
    set_logits(ac, [0.0, 0.0])
    state = make_state(rng)
    np.testing.assert_array_equal(logits_of(ac, state), [0.0, 0.0])
    draws = 10_000
    ones = sum(act(ac, state, "sample", rng)[0] for _ in range(draws))
    expected = draws / 2
    chi2 = ((ones - expected) ** 2 + (draws - ones - expected) ** 2) / expected
    # chi-square quantile at 0.999 with 1 degree of freedom
    assert chi2 < 10.828


def test_saturated_logits():
    rng = np.random.default_rng(10)
    ac = ActorCritic.build(2, hidden=8, seed=3)
    set_logits(ac, [10.0, -10.0])
    state = make_state(rng)
    assert act(ac, state, "greedy")[0] == 0
    assert sum(act(ac, state, "sample", rng)[0] for _ in range(1000)) == 0


def test_network_shapes():
    ac = ActorCritic.build(3, hidden=8)
    groups = {"channel": np.zeros((5, 2)), "quality": np.zeros((5, 3)), "codeword": np.zeros((5, 3))}
    logits, values = ac.forward(groups)
    assert logits.shape == (5, 2) and values.shape == (5,)
    assert {name.split(".")[0] for name in ac.parameters()} == {"actor", "critic"}


def test_network_checkpoint(tmp_path):
    path = tmp_path / "agent.ckpt"
    ac = ActorCritic.build(2, hidden=8, seed=4)
    ac.save(path, extra={"meta.threshold": np.array([0.3])})
    other = ActorCritic.build(2, hidden=8, seed=5).load(path)
    for name, values in ac.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[name], values)
    with pytest.raises(CheckpointError, match="hidden=8"):
        ActorCritic.build(2, hidden=4).load(path)


def test_ppo_update_improves_rewarded_action():
    rng = np.random.default_rng(5)
    ac = ActorCritic.build(2, hidden=8, seed=2)
    state = make_state(rng)
    optimizer = AdamState(lr=1e-2)

    def retransmit_probability():
        logits, _ = ac.forward({k: v.reshape(1, -1) for k, v in state.groups().items()})
        return float(np.exp(logits.log_softmax().data[0, 1]))

    before = retransmit_probability()
    for _ in range(10):
        buffer = RolloutBuffer()
        for _ in range(16):
            action, log_prob, value = act(ac, state, "sample", rng)
            buffer.add(state, action, log_prob, 10.0 if action == 1 else -5.0, value)
        losses = ppo_update(ac, buffer, 0.2, 2, 8, optimizer, rng)
        assert np.isfinite(losses.total)
    assert retransmit_probability() > before


def test_ppo_update_dumps_buffer_on_nan(tmp_path):
    rng = np.random.default_rng(6)
    buffer = filled_buffer(rng, 8)
    buffer.rewards[0] = float("nan")
    ac = ActorCritic.build(2, hidden=8)
    with pytest.raises(TrainingError) as err:
        ppo_update(ac, buffer, 0.2, 1, 4, AdamState(), dump_dir=tmp_path)
    assert err.value.dump_path is not None
    assert os.path.exists(err.value.dump_path)


def test_buffer_clear():
    buffer = filled_buffer(np.random.default_rng(7), 4)
    buffer.finish()
    assert len(buffer) == 4 and buffer.advantages is not None
    buffer.clear()
    assert len(buffer) == 0 and buffer.advantages is None
