"""Multi-branch convolutional blocks with query gating and per-stage kernel sizes,
on a small numpy autodiff engine, with cost, receptive-field and diversity analysis."""

from .architecture import KernelProtocol, ModelGraph, ModelVariant, VARIANTS, build_model, forward_features
from .blocks import IBM, SIBM, BranchOperator, GlobalQuery, MSBlock, ms_block_forward
from .core import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["KernelProtocol", "ModelGraph", "ModelVariant", "VARIANTS", "build_model", "forward_features",
           "IBM", "SIBM", "BranchOperator", "GlobalQuery", "MSBlock", "ms_block_forward", "Tensor", "no_grad"]
