from .nn import Conv2d, LayerNorm, Linear, Module, param
from .optim import AdamW
from .rng import RandomStream, seeded_rng
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv2d,
    cross_entropy,
    div,
    embedding,
    exp,
    gather,
    gelu,
    getitem,
    interp_matrix,
    interpolate,
    is_grad_enabled,
    layernorm_core,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    silu,
    softmax,
    strict_checks,
    sub,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
