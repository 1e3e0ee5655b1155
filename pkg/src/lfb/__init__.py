"""Long-term feature bank: windowed long-range context for short-term queries."""

from .bank import FeatureBank, WindowSpec, WindowedFeatures, pad_and_mask
from .fbo import FboConfig, StoConfig, fbo_nl, fbo_pool, nl_block, sto
from .model import LfbModel
from .tensor import Parameter, RngStream, Tape, Tensor

__all__ = [
    "FeatureBank", "WindowSpec", "WindowedFeatures", "pad_and_mask",
    "FboConfig", "StoConfig", "fbo_nl", "fbo_pool", "nl_block", "sto",
    "LfbModel", "Parameter", "RngStream", "Tape", "Tensor",
]

__version__ = "0.1.0"
