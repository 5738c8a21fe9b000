from .network import ActorCritic
from .network import act
from .ppo import PpoLosses
from .ppo import RolloutBuffer
from .ppo import clipped_surrogate
from .ppo import critic_loss
from .ppo import gae
from .ppo import ppo_update
from .state import AgentState
from .state import build_state
from .state import reward
