from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    no_grad,
    row_scatter,
)
from .params import CheckpointError, ParamStore, trunc_normal
from .optim import OptState, adamw_step, init_opt_state, step_from_grads
from .gradcheck import grad_check

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "concat",
    "row_scatter",
    "ParamStore",
    "CheckpointError",
    "trunc_normal",
    "OptState",
    "adamw_step",
    "init_opt_state",
    "step_from_grads",
    "grad_check",
]
