"""Differentiable feature-pyramid library with spatial and channel refinement blocks."""

from .autograd import Tensor, backward, no_grad
from .errors import ConfigError, ContractError, DrfpnError, FormatError, ShapeError
from .pyramid import Model, PyramidConfig, PyramidLevels, build_params, drfpn_forward, fpn_forward, param_count

__all__ = [
    "Tensor", "backward", "no_grad",
    "ConfigError", "ContractError", "DrfpnError", "FormatError", "ShapeError",
    "Model", "PyramidConfig", "PyramidLevels", "build_params", "drfpn_forward", "fpn_forward", "param_count",
]
