"""Minimal numpy tensor engine with reverse-mode automatic differentiation."""
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    corrupt_gradient,
    custom_op,
    default_dtype,
    div,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    matmul,
    max,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    softmax,
    sqrt,
    sub,
    sum,
    tanh,
    transpose,
)
from .nn import Linear, LayerNorm, MLP, Module, MultiHeadAttention, Parameter, TransformerLayer
from .optim import AdamW, AdamWState, adamw_step
from .checkpoint import CheckpointError, load_parameters, save_parameters
