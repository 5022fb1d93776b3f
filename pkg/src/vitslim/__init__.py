"""vitslim: a latency-aware vision-transformer toolkit on a minimal
float32 autodiff core — architecture descriptions with parameter/MAC
accounting, a weight-sharing supernet, per-block latency tables, and a
greedy latency-driven slimming search."""

from .arch import ArchSpec, count_macs, count_params, preset, toy_arch
from .errors import (GradientError, NumericsError, ShapeError, SpecError,
                     TableError, VitslimError)
from .model import Model, instantiate
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "Model", "Tensor", "no_grad", "instantiate",
    "preset", "toy_arch", "count_params", "count_macs",
    "VitslimError", "ShapeError", "GradientError", "NumericsError",
    "SpecError", "TableError", "__version__",
]
