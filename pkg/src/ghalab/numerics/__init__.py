from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    clip,
    concatenate,
    cross_entropy,
    div,
    dropout,
    embedding,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .optim import Adam, LrSchedule, OptimizerState, adam_step, inverse_sqrt_lr
from .gradcheck import gradcheck, numeric_grad

cross_entropy_label_smoothed = cross_entropy

__all__ = [
    "Adam", "LrSchedule", "OptimizerState", "ShapeError", "Tensor", "adam_step", "add",
    "backward", "clip", "concatenate", "cross_entropy", "cross_entropy_label_smoothed", "div",
    "dropout", "embedding", "exp", "getitem", "gradcheck", "inverse_sqrt_lr", "layer_norm",
    "linear", "log", "log_softmax", "matmul", "mean", "mul", "neg", "no_grad", "numeric_grad", "power",
    "relu", "reshape", "softmax", "sqrt", "stack", "sub", "sum_", "swapaxes", "transpose",
]
