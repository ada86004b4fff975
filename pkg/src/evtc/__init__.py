"""Desk-scale compression lab for hybrid conv/attention segmentation models."""

from . import checkpoint, data, distill, metrics, models, prune, quant, tensor, train
from .errors import (ConfigError, ContractError, DataError, DimensionError, EvtcError,
                     FormatError, NumericalError)
from .models import ModelConfig, SegModel, build_model, forward_segment
from .tensor import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"
