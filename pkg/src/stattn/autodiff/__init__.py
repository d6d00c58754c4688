from . import ops
from .numgrad import analytic_grads, gradient_errors, numeric_grad, projected, relative_error
from .ops import (
    BN_EPS,
    RunningStats,
    batchnorm2d,
    conv2d,
    elementwise,
    reduce,
    softmax,
)
from .tensor import (
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    UsageError,
    backward,
    ones,
    tensor,
    zeros,
)

__all__ = [
    "BN_EPS",
    "DimensionError",
    "NumericError",
    "RunningStats",
    "Tape",
    "Tensor",
    "UsageError",
    "analytic_grads",
    "backward",
    "batchnorm2d",
    "conv2d",
    "elementwise",
    "gradient_errors",
    "numeric_grad",
    "ones",
    "ops",
    "projected",
    "reduce",
    "relative_error",
    "softmax",
    "tensor",
    "zeros",
]
