"""Event-based backpropagation for spiking networks on a simulated many-core fabric."""
from .config import RunConfig
from .core import LayerParams, init_weights
from .estimator import EventPropClassifier
from .exceptions import ConfigurationError, DatasetParseError, ProtocolError
from .fabric import Fabric
from .loss import ABSTAIN, LossConfig
from .optim import AdamState, adam_step
from .reference import ReferenceEngine
from .yinyang import YinYangEncoder, make_dataset

__all__ = [
    "ABSTAIN", "AdamState", "ConfigurationError", "DatasetParseError",
    "EventPropClassifier", "Fabric", "LayerParams", "LossConfig", "ProtocolError",
    "ReferenceEngine", "RunConfig", "YinYangEncoder", "adam_step", "init_weights",
    "make_dataset",
]
__version__ = "0.1.0"
