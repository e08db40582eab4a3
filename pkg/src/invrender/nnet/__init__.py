"""Coordinate-network stack: positional encoding, MLPs, reverse-mode gradients, Adam."""

from . import autodiff
from .autodiff import Tensor, grad
from .mlp import MlpConfig, PosEncConfig, init_mlp, mlp_forward, posenc
from .optim import Adam

__all__ = [
    "Adam",
    "MlpConfig",
    "PosEncConfig",
    "Tensor",
    "autodiff",
    "grad",
    "init_mlp",
    "mlp_forward",
    "posenc",
]
