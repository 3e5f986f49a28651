"""Dense tensors with tape-based reverse-mode differentiation."""

from .gradcheck import grad_check
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .tensor import ContractError, Parameter, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "ContractError",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "grad_check",
    *_ops_all,
]
