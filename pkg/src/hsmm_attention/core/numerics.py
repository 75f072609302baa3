"""Log-domain arithmetic, Gaussian densities and gradient checking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_VAR_FLOOR = 1e-4


def log_sum_exp(values: Sequence[float]) -> float:
    """Return ``log(sum(exp(values)))`` without overflow.

    ``-inf`` entries are treated as log(0); an all ``-inf`` input gives ``-inf``.
    """
    if len(values) == 0:
        raise ValueError("log_sum_exp of an empty sequence is undefined")
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


@dataclass(frozen=True)
class GaussianParams:
    """Univariate Gaussian parameterised by mean and log-variance."""

    mean: float
    log_variance: float
    var_floor: float = DEFAULT_VAR_FLOOR

    @property
    def variance(self) -> float:
        return max(math.exp(self.log_variance), self.var_floor)


def gaussian_log_density(x: float, params: GaussianParams) -> float:
    if not (math.isfinite(x) and math.isfinite(params.mean) and math.isfinite(params.log_variance)):
        raise ValueError(f"non-finite input to gaussian_log_density: x={x}, params={params}")
    var = params.variance
    return -0.5 * (LOG_2PI + math.log(var)) - (x - params.mean) ** 2 / (2.0 * var)


def floored_log_variance(log_var, var_floor: float = DEFAULT_VAR_FLOOR) -> Value:
    """``log(max(exp(log_var), var_floor))`` on the tape."""
    return ad.log(ad.maximum(ad.exp(log_var), var_floor))


def gaussian_logpdf(x, mean, log_var) -> Value:
    """Elementwise Gaussian log-density on the tape; ``log_var`` must already be floored."""
    diff = ad.sub(x, mean)
    return -0.5 * (ad.add(LOG_2PI, log_var)) - 0.5 * (diff * diff) / ad.exp(log_var)


def finite_difference_check(
    f: Callable[[Value], Value],
    point: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Compare the tape gradient of ``f`` at ``point`` with central differences.

    ``f`` maps a 1-d :class:`Value` to a scalar :class:`Value`.  Returns
    ``max_i |g_ad - g_fd| / max(1e-8, |g_fd|)``.
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    x = ad.param(point)
    out = f(x)
    if not np.isfinite(out.data):
        raise FloatingPointError("f is not finite at the base point")
    ad.backward(out)
    g_ad = x.grad
    g_fd = central_differences(f, point, epsilon)
    denom = np.maximum(1e-8, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if point.size else 0.0


def central_differences(f: Callable[[Value], Value], point: np.ndarray, epsilon: float) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64).ravel()
    grad = np.empty_like(point)
    for i in range(point.size):
        hi, lo = point.copy(), point.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        fh, fl = f(Value(hi)).item(), f(Value(lo)).item()
        if not (math.isfinite(fh) and math.isfinite(fl)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fh - fl) / (2.0 * epsilon)
    return grad
