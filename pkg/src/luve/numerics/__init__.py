"""Array substrate: autodiff tensor, direct DFT, finite differences, RNG, I/O."""

from luve.numerics.fourier import dft2d, dft_matrix, idft2d, signed_frequencies
from luve.numerics.gradcheck import finite_diff_check, numerical_gradient, param_finite_diff_check
from luve.numerics.io import (
    load_checkpoint,
    load_tensor,
    read_tensor,
    save_checkpoint,
    save_tensor,
    tensor_bytes,
    write_tensor,
)
from luve.numerics.rng import XorShiftRNG
from luve.numerics.tensor import (
    GradTape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    custom_op,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    l1_loss,
    layer_norm,
    log,
    matmul,
    mean,
    mse_loss,
    mul,
    neg,
    no_grad,
    pad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
