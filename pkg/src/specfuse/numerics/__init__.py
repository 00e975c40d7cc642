"""Tensor core: autodiff, random streams, serialization, gradient oracle."""

from .gradcheck import grad_check
from .rng import Streams, derive_seed, stream
from .serialize import ContainerError, read_tensors, write_tensors
from .tensor import (
    Graph,
    NumericFault,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    cos,
    div,
    exp,
    gelu,
    getitem,
    l2_norm,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    pool2d,
    reshape,
    sin,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tensor,
    transpose,
    zeros,
)

__all__ = [
    "Graph", "NumericFault", "ShapeError", "Tensor", "add", "backward",
    "concat", "conv2d", "cos", "div", "exp", "gelu", "getitem", "l2_norm",
    "layer_norm", "log", "matmul", "mean", "mul", "parameter", "pool2d",
    "reshape", "sin", "softmax", "sqrt", "square", "stack", "sub", "sum_",
    "tensor", "transpose", "zeros", "grad_check", "Streams", "stream",
    "ContainerError", "read_tensors", "write_tensors",
]
