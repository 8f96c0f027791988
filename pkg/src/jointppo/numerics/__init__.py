from .checkpoint import CheckpointError, load_params, save_params
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    ContractError,
    DimensionError,
    InvalidMaskError,
    Tape,
    Tensor,
    active_tape,
    backward,
    clip,
    concat,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    relu,
    reshape,
    softmax,
    square,
    take,
    tanh,
    transpose,
    tsum,
)
