from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import Parameter, sgd_step, zero_grad
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, concat, is_grad_enabled, matmul, no_grad, ones, zeros

__all__ = [
    "DEFAULT_DTYPE", "Parameter", "ShapeError", "Tensor", "check_gradients", "concat",
    "is_grad_enabled", "matmul", "no_grad", "numerical_grad", "ones", "relative_error",
    "sgd_step", "zero_grad", "zeros",
]
