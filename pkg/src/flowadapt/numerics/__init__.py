from .grad import evaluate_with_gradients, finite_difference_gradients, max_relative_error, relative_error
from .optim import Adam, AdamConfig
from .rng import derive_seed, seeded_rng
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    sub,
    tabs,
    transpose,
    tsum,
)
