from .agent import AgentPolicy
from .baselines import AlwaysRetransmit
from .baselines import NeverRetransmit
from .baselines import OraclePolicy
from .baselines import RandomPolicy
from .baselines import ThresholdPolicy
from .policy import Policy
from .policy import make_policy
from .policy import policy_registry
