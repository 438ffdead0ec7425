from .gradcheck import STEP_LADDER, analytic_grads, finite_diff_check
from .ops import (
    BatchNormParams,
    ConvParams,
    activation,
    batch_norm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    max_pool3d,
    relu,
    sigmoid,
    tanh,
)
from .tensor import (
    Node,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    default_dtype,
    div,
    getitem,
    mul,
    neg,
    no_record,
    precision,
    reshape,
    set_default_dtype,
    stack,
    sub,
    tabs,
    tsum,
)

__all__ = [
    "BatchNormParams", "ConvParams", "STEP_LADDER", "Node", "ShapeError", "Tape", "Tensor",
    "activation", "active_tape", "add", "analytic_grads", "as_tensor", "backward",
    "batch_norm3d", "concat", "concat_channels", "conv3d", "conv_transpose3d",
    "default_dtype", "div", "finite_diff_check", "getitem", "max_pool3d", "mul",
    "neg", "no_record", "precision", "relu", "reshape", "set_default_dtype",
    "sigmoid", "stack", "sub", "tabs", "tanh", "tsum",
]
