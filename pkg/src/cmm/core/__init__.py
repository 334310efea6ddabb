from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .tensor import DTYPE, NumericError, Parameter, Tape, Tensor, UsageError, no_grad

__all__ = [
    "DTYPE",
    "NumericError",
    "Parameter",
    "Tape",
    "Tensor",
    "UsageError",
    "check_gradients",
    "no_grad",
    "numeric_grad",
    "ops",
    "relative_error",
]
