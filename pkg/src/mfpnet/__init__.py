"""Multi-scale feature-pyramid U-Net with bidirectional cross-attention, in numpy."""
from .errors import ConfigError, ContractError, FormatError, MFPError, NonFiniteError, ShapeError
from .model import VARIANTS, ModelSpec, build_model, forward, param_count
from .tensor import Tensor, backward, grad_check

__all__ = [
    "ConfigError", "ContractError", "FormatError", "MFPError", "NonFiniteError", "ShapeError",
    "VARIANTS", "ModelSpec", "build_model", "forward", "param_count",
    "Tensor", "backward", "grad_check",
]
__version__ = "0.1.0"
