import logging

import numpy as np

from semharq.autodiff import Mlp
from semharq.autodiff import concat
from semharq.autodiff.checkpoint import load_checkpoint
from semharq.autodiff.checkpoint import save_checkpoint
from semharq.errors import CheckpointError
from semharq.errors import ConfigurationError

GROUP_SIZES = {"channel": 2, "quality": 3}


class ActorCritic:
    r"""
    Grouped-input actor-critic network of the retransmission agent.

    Each state group (channel, quality, received check codeword) passes its
    own linear projection; the projections are concatenated and feed a shared
    tanh trunk with an actor head (two logits, accept or retransmit) and a
    critic head (state value).

    Parameters
    ----------
    projections : dict of Mlp
        Linear projections keyed by group name.
    trunk : Mlp
        Shared body.
    actor_head : Mlp
        Maps the trunk output to two logits.
    critic_head : Mlp
        Maps the trunk output to one value.
    """

    def __init__(self, projections, trunk, actor_head, critic_head):
        self.projections = dict(projections)
        self.trunk = trunk
        self.actor_head = actor_head
        self.critic_head = critic_head
        if actor_head.output_dim != 2 or critic_head.output_dim != 1:
            raise ConfigurationError("Actor head needs 2 outputs and critic head 1.")

    @classmethod
    def build(cls, check_dim, hidden=64, seed=0):
        """Freshly initialised network for check codewords of length ``check_dim``."""
        sizes = dict(GROUP_SIZES, codeword=check_dim)
        projections = {
            name: Mlp.build([n, hidden], output_activation="identity", seed=[seed, 20, i],
                            name=f"actor.{name}")
            for i, (name, n) in enumerate(sizes.items())
        }
        return cls(
            projections,
            Mlp.build([3 * hidden, hidden], output_activation="tanh", seed=[seed, 21], name="actor.trunk"),
            Mlp.build([hidden, 2], seed=[seed, 22], name="actor.head"),
            Mlp.build([hidden, 1], seed=[seed, 23], name="critic.head"),
        )

    @property
    def check_dim(self):
        return self.projections["codeword"].input_dim

    @property
    def hidden(self):
        return self.trunk.output_dim

    def forward(self, groups):
        """
        Logits and values for a batch of grouped states.

        Parameters
        ----------
        groups : dict
            Matrices of shape ``(B, n_group)`` keyed by group name, see
            :func:`~semharq.agent.state.stack_groups`.

        Returns
        -------
        tuple of Tensor
            ``(logits, values)`` of shapes ``(B, 2)`` and ``(B,)``.
        """
        parts = [self.projections[name](np.asarray(groups[name])) for name in self.projections]
        body = self.trunk(concat(parts))
        return self.actor_head(body), self.critic_head(body).reshape(-1)

    def parameters(self):
        params = {}
        for net in [*self.projections.values(), self.trunk, self.actor_head, self.critic_head]:
            params.update(net.parameters())
        return params

    def state_dict(self):
        state = {"meta.agent": np.array([self.check_dim, self.hidden], dtype=np.float64)}
        state.update({name: p.data.copy() for name, p in self.parameters().items()})
        return state

    def load_state_dict(self, state):
        if "meta.agent" not in state:
            raise CheckpointError("Checkpoint holds no agent parameters.")
        check_dim, hidden = (int(v) for v in state["meta.agent"])
        if (check_dim, hidden) != (self.check_dim, self.hidden):
            raise CheckpointError(
                f"Checkpoint agent has k={check_dim}, hidden={hidden}; "
                f"configuration has k={self.check_dim}, hidden={self.hidden}."
            )
        for name, param in self.parameters().items():
            if name not in state:
                raise CheckpointError(f"Agent parameter '{name}' missing from checkpoint.")
            param.data = np.array(state[name], dtype=np.float64)

    def save(self, path, extra=None):
        state = self.state_dict()
        state.update(extra or {})
        save_checkpoint(state, path)

    def load(self, path):
        self.load_state_dict(load_checkpoint(path))
        logging.info(f"Loaded agent parameters from {path}.")
        return self


def act(ac, state, mode="sample", rng=None):
    """
    Choose an action for one state.

    Parameters
    ----------
    ac : ActorCritic
        Policy network.
    state : AgentState
        Decision input.
    mode : str
        ``"sample"`` draws from the categorical distribution, ``"greedy"``
        takes the most probable action (ties choose 0).
    rng : numpy.random.Generator, optional
        Required in sample mode.

    Returns
    -------
    tuple
        ``(action, log_prob, value)``.
    """
    groups = {name: values.reshape(1, -1) for name, values in state.groups().items()}
    logits, values = ac.forward(groups)
    log_probs = logits.log_softmax(axis=-1).data[0]
    if mode == "greedy":
        action = int(log_probs[1] > log_probs[0])
    elif mode == "sample":
        if rng is None:
            raise ConfigurationError("Sampling an action needs an rng.")
        action = int(rng.random() < np.exp(log_probs[1]))
    else:
        raise ConfigurationError(f"Unknown action mode '{mode}'. Choose 'sample' or 'greedy'.")
    return action, float(log_probs[action]), float(values.data[0])
