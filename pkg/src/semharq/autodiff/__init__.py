from .checkpoint import checkpoint_digest
from .checkpoint import load_checkpoint
from .checkpoint import save_checkpoint
from .gradcheck import grad_check
from .mlp import Dense
from .mlp import Mlp
from .mlp import backward
from .mlp import forward
from .optim import AdamState
from .optim import adam_step
from .tensor import Tensor
from .tensor import concat
from .tensor import minimum
