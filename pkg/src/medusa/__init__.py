"""Desk-scale multi-scale encoder-decoder self-attention classifier on numpy.

The package carries its own reverse-mode autodiff (``tensor``, ``ops``),
the backbone and attention modules, synthetic data, training, metrics,
checkpoints and a CLI.  Hot loops run under numba when it is installed;
set ``MEDUSA_DISABLE_JIT=1`` to force the pure-numpy kernels.
"""
from .tensor import (ConfigError, GradientError, MedusaError, NumericalError, Parameter, ShapeError, Tensor,
                     backward, no_grad)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "GradientError", "MedusaError", "NumericalError", "Parameter", "ShapeError", "Tensor",
    "backward", "no_grad", "__version__",
]
