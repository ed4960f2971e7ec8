from .optim import AdamState, adam_step, clip_global_norm, global_norm, polyak_update
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    check_finite,
    clip,
    clip_straight_through,
    columns,
    concat,
    div,
    elementwise,
    elu,
    exp,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    reduce,
    reshape,
    scale,
    sigmoid,
    softplus,
    square,
    sub,
    sum,
    tanh,
)

__all__ = [
    "AdamState", "Tape", "Tensor", "active_tape", "adam_step", "add", "as_tensor",
    "backward", "check_finite", "clip", "clip_global_norm", "clip_straight_through", "columns", "concat", "div",
    "elementwise", "elu", "exp", "global_norm", "layer_norm", "linear", "log", "matmul",
    "mean", "mul", "neg", "polyak_update", "reduce", "reshape", "scale", "sigmoid", "softplus",
    "square", "sub", "sum", "tanh",
]
