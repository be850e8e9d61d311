from . import ops
from .gradcheck import check_gradients, finite_diff_grad, max_relative_error
from .nn import BatchNorm2d, Conv2d, ConvBNAct, Linear, Module, ModuleList
from .tensor import Parameter, Tape, Tensor, is_grad_enabled, no_grad

__all__ = [
    "ops",
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "Module",
    "ModuleList",
    "Conv2d",
    "BatchNorm2d",
    "ConvBNAct",
    "Linear",
    "finite_diff_grad",
    "check_gradients",
    "max_relative_error",
]
