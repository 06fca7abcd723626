"""Correlated standard-normal macro factors y_1..y_T.

The factor series has unit marginal variance and a stationary (Toeplitz)
correlation structure ``corr(y_s, y_t) = d_{|s-t|}`` where ``d`` is one of

* exponential decay ``d_i = theta**i``   (AR(1), short memory)
* power decay       ``d_i = (i + 1)**-gamma`` (intermediate / long memory)
* independent       ``d_i = 0`` for ``i >= 1``
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError, NotPositiveDefinite

EXPONENTIAL = "exponential"
POWER = "power"
INDEPENDENT = "independent"
FAMILIES = (EXPONENTIAL, POWER, INDEPENDENT)

_FAMILY_ALIASES = {
    "exp": EXPONENTIAL,
    "exponential": EXPONENTIAL,
    "pow": POWER,
    "power": POWER,
    "ind": INDEPENDENT,
    "indep": INDEPENDENT,
    "independent": INDEPENDENT,
}

CHOLESKY_JITTER = 1e-10


def canonical_family(name: str) -> str:
    try:
        return _FAMILY_ALIASES[name.lower()]
    except KeyError:
        raise DomainError(f"unknown correlation family {name!r}") from None


@dataclass(frozen=True)
class CorrelationKernel:
    """Temporal decay family of the macro factor.

    ``param`` is theta for the exponential family, gamma for the power family
    and ignored for the independent one.
    """

    family: str
    param: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", canonical_family(self.family))
        p = float(self.param)
        if self.family == EXPONENTIAL and not (0.0 <= p < 1.0):
            raise DomainError(f"exponential kernel needs 0 <= theta < 1, got {p}")
        if self.family == POWER and not (p >= 0.0 and math.isfinite(p)):
            raise DomainError(f"power kernel needs gamma >= 0, got {p}")
        if self.family == INDEPENDENT:
            p = 0.0
        object.__setattr__(self, "param", p)

    @classmethod
    def exponential(cls, theta: float) -> "CorrelationKernel":
        return cls(EXPONENTIAL, theta)

    @classmethod
    def power(cls, gamma: float) -> "CorrelationKernel":
        return cls(POWER, gamma)

    @classmethod
    def independent(cls) -> "CorrelationKernel":
        return cls(INDEPENDENT)

    def values(self, lags) -> np.ndarray:
        """Vectorized ``d_lag``; lag 0 is always 1."""
        lags = np.asarray(lags)
        if np.any(lags < 0):
            raise DomainError("lags must be non-negative")
        lags_f = lags.astype(float)
        if self.family == EXPONENTIAL:
            # 0.0**0 == 1, so theta = 0 gives the identity correctly
            out = np.power(self.param, lags_f)
        elif self.family == POWER:
            out = np.power(lags_f + 1.0, -self.param)
        else:
            out = (lags == 0).astype(float)
        return out

    def to_dict(self) -> dict:
        return {"family": self.family, "param": self.param}


def kernel_value(kernel: CorrelationKernel, lag: int) -> float:
    if lag < 0:
        raise DomainError(f"lag must be >= 0, got {lag}")
    return float(kernel.values(np.array([lag]))[0])


def build_correlation_matrix(kernel: CorrelationKernel, T: int) -> np.ndarray:
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    return scipy.linalg.toeplitz(kernel.values(np.arange(T)))


def cholesky_factor(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a single 1e-10 diagonal jitter retry."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(sigma + CHOLESKY_JITTER * np.eye(sigma.shape[0]))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"correlation matrix of size {sigma.shape[0]} is not positive definite "
            f"even after jitter {CHOLESKY_JITTER:g}"
        ) from None


def kernel_cholesky(kernel: CorrelationKernel, T: int) -> np.ndarray:
    return cholesky_factor(build_correlation_matrix(kernel, T))


def sample_path_ar1(theta: float, T: int, rng: np.random.Generator) -> np.ndarray:
    """O(T) draw of the exponential-kernel path via the AR(1) recursion."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    xi = rng.standard_normal(T)
    y = np.empty(T)
    y[0] = xi[0]
    innov = math.sqrt(1.0 - theta * theta)
    for t in range(1, T):
        y[t] = theta * y[t - 1] + innov * xi[t]
    return y


def sample_path_general(kernel: CorrelationKernel, T: int, rng: np.random.Generator,
                        size: int | None = None) -> np.ndarray:
    """Draw ``N_T(0, Sigma)`` as ``L @ z``.

    With ``size`` given, returns an array of shape ``(size, T)``.
    """
    L = kernel_cholesky(kernel, T)
    if size is None:
        return L @ rng.standard_normal(T)
    return rng.standard_normal((size, T)) @ L.T


def sample_path(kernel: CorrelationKernel, T: int, rng: np.random.Generator) -> np.ndarray:
    """Default sampler: recursion for exponential kernels, Cholesky otherwise."""
    if kernel.family == EXPONENTIAL:
        return sample_path_ar1(kernel.param, T, rng)
    if kernel.family == INDEPENDENT:
        return rng.standard_normal(T)
    return sample_path_general(kernel, T, rng)


def conditional_forecast(kernel: CorrelationKernel, observed, horizon: int = 1) -> tuple[float, float]:
    """Gaussian law of ``y_{t+h}`` given ``y_1..y_t`` (Schur complement)."""
    y = np.asarray(observed, dtype=float)
    t = y.size
    if t < 1:
        raise DomainError("need at least one observed value")
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    # covariance of the history and its cross-covariance with y_{t+h}
    L = kernel_cholesky(kernel, t)
    cross = kernel.values(t + horizon - 1 - np.arange(t))
    w = scipy.linalg.solve_triangular(L, cross, lower=True)
    u = scipy.linalg.solve_triangular(L, y, lower=True)
    mean = float(w @ u)
    var = float(1.0 - w @ w)
    if var <= 0.0:
        if var > -1e-12:
            var = 0.0
        else:
            raise NotPositiveDefinite(f"conditional variance {var} is negative")
    return mean, var
