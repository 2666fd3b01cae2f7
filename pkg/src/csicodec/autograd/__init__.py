"""Small reverse-mode autodiff engine used to train the codec."""

from . import functional
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Parameter, PReLU
from .optim import Adam
from .tensor import Tensor, as_tensor

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "Module",
    "Parameter",
    "PReLU",
    "Tensor",
    "as_tensor",
    "functional",
]
