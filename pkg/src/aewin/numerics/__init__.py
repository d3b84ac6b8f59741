from .gradcheck import grad_check, grad_check_many, numeric_gradient, relative_error
from .io import ContainerError, load_tensors, save_tensors
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = [
    *_tensor_all,
    "grad_check",
    "grad_check_many",
    "numeric_gradient",
    "relative_error",
    "save_tensors",
    "load_tensors",
    "ContainerError",
]
