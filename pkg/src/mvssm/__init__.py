"""Selective state-space engine for two-view image classification.

The main entry points are :class:`mvssm.model.Model` (built from a
:class:`mvssm.model.ModelConfig`), :func:`mvssm.train.train_loop` and the
``mvssm`` command line tool.
"""
from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     OpRegistrationError, UndefinedMetricError)
from .model import Model, ModelConfig, build, forward
from .tensor import Parameter, Tensor
from .train import TrainConfig, train_loop

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "FormatError", "Model", "ModelConfig",
    "NumericError", "OpRegistrationError", "Parameter", "Tensor", "TrainConfig",
    "UndefinedMetricError", "build", "forward", "train_loop",
]
__version__ = "0.1.0"
