from .conv import ConvSpec, output_extent
from .functional import (
    add, avg_pool, batchnorm, bce_loss, concat, conv, global_avg_pool, linear, matmul,
    max_pool, mean, mul, neg, relu, reshape, sigmoid, split, sub, sum,
)
from .gradcheck import finite_diff_grad, grad_mismatch
from .serialization import FormatError, load_archive, load_tensor, save_archive, save_tensor
from .tensor import (
    GradTape, NonFiniteError, ShapeError, Tensor, as_tensor, backward, constant, create,
    debug_mode, precision, zeros,
)

__all__ = [
    "ConvSpec", "FormatError", "GradTape", "NonFiniteError", "ShapeError", "Tensor",
    "add", "as_tensor", "avg_pool", "backward", "batchnorm", "bce_loss", "concat", "constant",
    "conv", "create", "debug_mode", "finite_diff_grad", "global_avg_pool", "grad_mismatch",
    "linear", "load_archive", "load_tensor", "matmul", "max_pool", "mean", "mul", "neg",
    "output_extent", "precision", "relu", "reshape", "save_archive", "save_tensor", "sigmoid",
    "split", "sub", "sum", "zeros",
]
