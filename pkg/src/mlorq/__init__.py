"""Joint mixed-precision quantization and low-rank compression of linear layers."""

from .estimator import MLoRQ
from .inter_search import MemoryBudget
from .lorada import LoRAdaConfig
from .netsim import Layer, SequentialModel

__all__ = ["MLoRQ", "MemoryBudget", "LoRAdaConfig", "Layer", "SequentialModel"]
__version__ = "0.1.0"
