from . import ops
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import ConvSpec
from .tensor import Tape, Tensor, as_tensor, backward, no_record

__all__ = [
    "ConvSpec", "Tape", "Tensor", "as_tensor", "backward", "check_gradients",
    "no_record", "numerical_gradient", "ops", "relative_error",
]
