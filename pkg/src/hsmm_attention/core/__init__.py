from . import autodiff
from .autodiff import Value, backward, param, zero_grad
from .numerics import (
    DEFAULT_VAR_FLOOR,
    GaussianParams,
    finite_difference_check,
    gaussian_log_density,
    gaussian_logpdf,
    log_sum_exp,
)

__all__ = [
    "autodiff",
    "Value",
    "backward",
    "param",
    "zero_grad",
    "DEFAULT_VAR_FLOOR",
    "GaussianParams",
    "finite_difference_check",
    "gaussian_log_density",
    "gaussian_logpdf",
    "log_sum_exp",
]
