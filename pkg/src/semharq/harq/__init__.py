from .frames import Frame
from .frames import frame_roundtrip
from .frames import parse
from .frames import serialize
from .protocol import HarqSystem
from .protocol import TransmissionRecord
from .protocol import initial_round
from .protocol import retransmission_round
from .protocol import run_transmission
from .retx import RetxBundle
