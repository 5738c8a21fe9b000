__version__ = "0.1.0"

import importlib.resources
import os

__datapath__ = os.path.join(importlib.resources.files("semharq"), "data")


from .analyses import SweepAnalysis
from .config import RunConfig
from .harq.protocol import HarqSystem
from .harq.protocol import run_transmission
