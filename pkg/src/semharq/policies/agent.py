from semharq.agent.network import act
from semharq.agent.state import build_state
from semharq.errors import ConfigurationError
from semharq.policies.policy import Policy
from semharq.policies.policy import policy_registry


@policy_registry
class AgentPolicy(Policy):
    """
    Decisions of a trained actor-critic network.

    The action's log-probability and the critic value are stored on the
    record for the PPO update.

    Parameters
    ----------
    network : semharq.agent.ActorCritic
        Policy network.
    mode : str, optional
        ``"greedy"`` (default, deterministic) or ``"sample"``.
    """

    kind = "agent"

    def __init__(self, **kwargs):
        kwargs.setdefault("mode", "greedy")
        super().__init__(**kwargs)
        if "network" not in self.__dict__:
            raise ConfigurationError("Agent policy needs a 'network'.")

    def decide(self, record, rng):
        state = build_state(record, record.threshold)
        action, log_prob, value = act(self.network, state, self.mode, rng)
        record.log_prob = log_prob
        record.value = value
        return action
