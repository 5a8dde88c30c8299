"""Cascaded atrous group attention: a numpy autodiff engine, layers, the CAGA
block, a small classifier and the training / interpretation tooling around it."""

from .attention import CaaConfig, CagaBlock, CagaConfig, caga_block, caga_param_count
from .errors import CagaError, ConfigError, ContractError, DatasetError, NumericError, ParseError, ShapeError
from .model import CagaClassifier, ModelConfig
from .tensor import ComputationTape, Tensor, backward, gradcheck, no_grad

__version__ = "0.1.0"

__all__ = [
    "CaaConfig", "CagaBlock", "CagaConfig", "caga_block", "caga_param_count",
    "CagaError", "ConfigError", "ContractError", "DatasetError", "NumericError", "ParseError", "ShapeError",
    "CagaClassifier", "ModelConfig", "ComputationTape", "Tensor", "backward", "gradcheck", "no_grad",
]
