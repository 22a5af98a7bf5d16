from .conv import ConvLayer, DenseBlock, conv2d, dense_block
from .optim import AdamState, adam_step
from .tensor import (
    NumericsError,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    leaky_relu,
    mean,
    mul,
    no_grad,
    reshape,
    sigmoid,
    sqrt,
    square,
    straight_through,
    sub,
    total,
)

__all__ = [
    "AdamState",
    "ConvLayer",
    "DenseBlock",
    "NumericsError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "conv2d",
    "dense_block",
    "div",
    "exp",
    "leaky_relu",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "sigmoid",
    "sqrt",
    "square",
    "straight_through",
    "sub",
    "total",
]
