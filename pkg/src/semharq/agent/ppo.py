import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from semharq.agent.state import stack_groups
from semharq.autodiff import adam_step
from semharq.autodiff import backward
from semharq.autodiff import minimum
from semharq.autodiff.tensor import as_tensor
from semharq.errors import TrainingError


class RolloutBuffer:
    """
    Transitions collected with a frozen snapshot of the policy.

    Every retransmission decision is its own episode, so the collection loop
    stores ``done = 1`` for each step. The advantage recursion still honours
    arbitrary done flags.
    """

    def __init__(self):
        self.states = []
        self.actions = []
        self.log_probs = []
        self.rewards = []
        self.values = []
        self.dones = []
        self.advantages = None
        self.returns = None

    def __len__(self):
        return len(self.rewards)

    def add(self, state, action, log_prob, reward, value, done=1):
        self.states.append(state)
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(float(done))

    def clear(self):
        self.__init__()

    def finish(self, gamma=0.99, lam=0.95, last_value=0.0):
        """Compute and store advantages and returns."""
        self.advantages, self.returns = gae(self, gamma, lam, last_value)
        return self

    def dump(self, path):
        """Write the numeric content to an ``.npz`` file."""
        np.savez(
            path,
            actions=np.array(self.actions),
            log_probs=np.array(self.log_probs),
            rewards=np.array(self.rewards),
            values=np.array(self.values),
            dones=np.array(self.dones),
            **({"codewords": stack_groups(self.states)["codeword"]} if self.states else {}),
        )
        return path


def gae(buffer, gamma=0.99, lam=0.95, last_value=0.0):
    r"""
    Generalized advantage estimation.

    .. math::

        \delta_t = r_t + \gamma (1 - d_t) V(s_{t+1}) - V(s_t)

        \hat{A}_t = \delta_t + \gamma \lambda (1 - d_t) \hat{A}_{t+1}

        \hat{R}_t = \hat{A}_t + V(s_t)

    Parameters
    ----------
    buffer : RolloutBuffer
        Rewards, values and done flags in collection order.
    gamma, lam : float
        Discount and GAE factors.
    last_value : float
        Bootstrap value after the final step when it is not terminal.

    Returns
    -------
    tuple of numpy.ndarray
        ``(advantages, returns)``.
    """
    rewards = np.asarray(buffer.rewards, dtype=np.float64)
    values = np.asarray(buffer.values, dtype=np.float64)
    dones = np.asarray(buffer.dones, dtype=np.float64)
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        next_value = values[t + 1] if t + 1 < rewards.size else last_value
        delta = rewards[t] + gamma * (1.0 - dones[t]) * next_value - values[t]
        running = delta + gamma * lam * (1.0 - dones[t]) * running
        advantages[t] = running
    return advantages, advantages + values


def clipped_surrogate(log_prob_new, log_prob_old, advantages, clip_eps=0.2):
    r"""
    PPO actor loss.

    .. math::

        L = -E\left[\min\left(\rho \hat{A},\,
        \mathrm{clip}(\rho, 1 - \epsilon, 1 + \epsilon) \hat{A}\right)\right],
        \qquad \rho = \exp(\log\pi_\mathrm{new} - \log\pi_\mathrm{old})

    Returns
    -------
    Tensor
        Scalar loss.
    """
    ratio = (as_tensor(log_prob_new) - np.asarray(log_prob_old, dtype=np.float64)).exp()
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return -minimum(unclipped, clipped).mean()


def critic_loss(ac, groups, returns):
    r"""Value regression loss :math:`E[(V(s) - \hat{R})^2]`."""
    _, values = ac.forward(groups)
    return ((values - np.asarray(returns, dtype=np.float64)) ** 2).mean()


@dataclass
class PpoLosses:
    actor: float
    critic: float
    entropy: float
    total: float


def ppo_update(ac, buffer, clip_eps, epochs, minibatch, optimizer_state, rng=None,
               entropy_coef=0.01, value_coef=0.5, gamma=0.99, lam=0.95, dump_dir=None):
    """
    Clipped-surrogate PPO update of ``ac`` from one rollout buffer.

    Advantages are normalized per buffer to mean 0 and unit standard
    deviation. The optimized loss is
    ``actor + value_coef * critic - entropy_coef * entropy``.

    Parameters
    ----------
    ac : ActorCritic
        Network, updated in place.
    buffer : RolloutBuffer
        Transitions; advantages are computed here unless already present.
    clip_eps : float
        Ratio clipping band.
    epochs : int
        Passes over the buffer.
    minibatch : int
        Transitions per gradient step.
    optimizer_state : AdamState
        Adam state shared across updates.
    rng : numpy.random.Generator, optional
        Shuffles the minibatches; without it the order is fixed.

    Returns
    -------
    PpoLosses
        Losses averaged over all gradient steps.

    Raises
    ------
    TrainingError
        If a loss turns non-finite; the buffer is dumped first and the dump
        path is attached to the error.
    """
    if not len(buffer):
        raise TrainingError("PPO update on an empty buffer.")
    if buffer.advantages is None:
        buffer.finish(gamma, lam)
    groups = stack_groups(buffer.states)
    actions = np.asarray(buffer.actions)
    old_log_probs = np.asarray(buffer.log_probs)
    returns = np.asarray(buffer.returns)
    advantages = np.asarray(buffer.advantages)
    advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    params = ac.parameters()
    n = len(buffer)
    totals = np.zeros(4)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, minibatch):
            idx = order[start:start + minibatch]
            batch_groups = {name: values[idx] for name, values in groups.items()}
            logits, values = ac.forward(batch_groups)
            log_probs = logits.log_softmax(axis=-1)
            chosen = log_probs[np.arange(idx.size), actions[idx]]
            actor = clipped_surrogate(chosen, old_log_probs[idx], advantages[idx], clip_eps)
            critic = ((values - returns[idx]) ** 2).mean()
            entropy = -(log_probs.exp() * log_probs).sum(axis=-1).mean()
            loss = actor + value_coef * critic - entropy_coef * entropy
            if not np.isfinite(loss.item()):
                directory = dump_dir or tempfile.gettempdir()
                os.makedirs(directory, exist_ok=True)
                path = buffer.dump(os.path.join(directory, f"ppo_buffer_step{optimizer_state.step_count}.npz"))
                logging.error(f"Non-finite PPO loss at step {optimizer_state.step_count}; buffer dumped to {path}.")
                raise TrainingError(f"Non-finite PPO loss; buffer dumped to {path}.", dump_path=path)
            adam_step(params, backward(params, loss), optimizer_state)
            totals += [actor.item(), critic.item(), entropy.item(), loss.item()]
            steps += 1
    return PpoLosses(*(totals / max(steps, 1)))
