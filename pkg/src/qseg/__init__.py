"""QAT and int8 inference toolkit for a small promptable segmentation model."""

from .errors import (ConfigurationError, ContractError, FormatError, QsegError,
                     ShapeError)
from .model import ModelConfig, PromptSegModel
from .quant import QuantizerState, QuantTensor
from .tensor import Tape, Tensor

__all__ = [
    "ConfigurationError", "ContractError", "FormatError", "QsegError",
    "ShapeError", "ModelConfig", "PromptSegModel", "QuantizerState",
    "QuantTensor", "Tape", "Tensor",
]

__version__ = "0.1.0"
