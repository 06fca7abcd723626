"""Finite-N Merton default process and its Poisson / log-normal intensity limit.

Sign convention: every intensity API works with the flipped factor
``y_hat = -y`` so that a larger factor means more defaults,
``lambda(y) = lambda0 * exp(alpha * y)``.  The finite-N conditional PD keeps
the asset-value convention ``G(y) = Phi((Y - sqrt(rho) y) / sqrt(1 - rho))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special, stats

from .errors import DomainError
from .latent import EXPONENTIAL, INDEPENDENT, CorrelationKernel, sample_path, sample_path_general

DEFAULT_BETA = 1.3
DEFAULT_NODES = 64
MAX_NODES = 256
QUAD_TOL = 1e-6


@dataclass(frozen=True)
class MertonParams:
    p_prime: float
    rho_A: float
    N: int
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        if not 0.0 < self.p_prime < 1.0:
            raise DomainError(f"p_prime must lie in (0, 1), got {self.p_prime}")
        if not 0.0 <= self.rho_A < 1.0:
            raise DomainError(f"rho_A must lie in [0, 1), got {self.rho_A}")
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"N must be a positive integer, got {self.N}")
        if not self.beta > 0.0:
            raise DomainError(f"beta must be positive, got {self.beta}")

    @property
    def threshold(self) -> float:
        return float(special.ndtri(self.p_prime))


@dataclass(frozen=True)
class IntensityParams:
    lambda0: float
    alpha: float

    def __post_init__(self) -> None:
        if not (self.lambda0 > 0.0 and math.isfinite(self.lambda0)):
            raise DomainError(f"lambda0 must be positive, got {self.lambda0}")
        if not (self.alpha >= 0.0 and math.isfinite(self.alpha)):
            raise DomainError(f"alpha must be >= 0, got {self.alpha}")


def conditional_pd(y, params: MertonParams):
    """Default probability of one obligor given the (unflipped) factor ``y``."""
    rho = params.rho_A
    arg = (params.threshold - math.sqrt(rho) * np.asarray(y, dtype=float)) / math.sqrt(1.0 - rho)
    out = special.ndtr(arg)
    return float(out) if np.ndim(out) == 0 else out


def logistic_phi(x, beta: float = DEFAULT_BETA):
    """Logistic stand-in for the normal CDF, ``1 / (1 + exp(-beta x))``."""
    if not beta > 0.0:
        raise DomainError(f"beta must be positive, got {beta}")
    out = special.expit(beta * np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def small_pd_closed_form(y, params: MertonParams):
    """``p'^(1/sqrt(1-rho)) exp(-alpha y)``, the small-PD logistic approximation of G(y)."""
    ip = limit_map(params)
    out = ip.lambda0 / params.N * np.exp(-ip.alpha * np.asarray(y, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def limit_map(params: MertonParams) -> IntensityParams:
    s = math.sqrt(1.0 - params.rho_A)
    lambda0 = params.N * params.p_prime ** (1.0 / s)
    alpha = params.beta * math.sqrt(params.rho_A) / s
    return IntensityParams(lambda0=lambda0, alpha=alpha)


def intensity(y, ip: IntensityParams):
    out = ip.lambda0 * np.exp(ip.alpha * np.asarray(y, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def intensity_moments(ip: IntensityParams) -> tuple[float, float]:
    """Mean and variance of the log-normal intensity."""
    a2 = ip.alpha ** 2
    lam_bar = ip.lambda0 * math.exp(a2 / 2.0)
    v_bar = lam_bar ** 2 * math.expm1(a2)
    return lam_bar, v_bar


def lognormal_intensity_density(lam, ip: IntensityParams):
    if ip.alpha == 0.0:
        raise DomainError("alpha = 0 gives a point mass at lambda0, not a density")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0.0):
        raise DomainError("density is defined for lam > 0 only")
    a = ip.alpha
    z = (np.log(lam) - math.log(ip.lambda0)) / a
    out = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * a * lam)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Poisson / log-normal mixture by mode-centred Gauss-Hermite quadrature
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(n)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    # weight * exp(x^2) undoes the Gaussian factor built into the rule
    return x, logw + x * x


def _log_integrand(y, k, log_lam0, alpha, mean, var):
    ay = alpha * y
    return (k * (log_lam0 + ay) - np.exp(log_lam0 + ay) - special.gammaln(k + 1.0)
            - 0.5 * (y - mean) ** 2 / var - 0.5 * math.log(2.0 * math.pi * var))


def _mode(k, log_lam0, alpha, mean, var, iters: int = 100):
    # g'(y) is concave and decreasing: Newton started right of the root stays
    # right of it and converges monotonically.  At the start below the Poisson
    # term already pulls down (lambda > k) and the prior term is <= 0.
    y = np.maximum(float(mean), (np.log(k + 1.0) - log_lam0) / alpha)
    for _ in range(iters):
        lam = np.exp(log_lam0 + alpha * y)
        g1 = alpha * (k - lam) - (y - mean) / var
        g2 = -lam * alpha * alpha - 1.0 / var
        step = g1 / g2
        y = y - step
        if np.all(np.abs(step) < 1e-12 * (1.0 + np.abs(y))):
            break
    lam = np.exp(log_lam0 + alpha * y)
    curv = lam * alpha * alpha + 1.0 / var
    return y, curv


def _gh_nodes(k, log_lam0, alpha, mean, var, n):
    """Nodes and log-weights (including the integrand) for each k.

    Returns ``(y, logterms)`` of shape ``k.shape + (n,)``; the integral is
    ``exp(logsumexp(logterms, axis=-1))``.
    """
    x, logw = _hermite(n)
    center, curv = _mode(k, log_lam0, alpha, mean, var)
    scale = np.sqrt(2.0 / curv)
    y = center[..., None] + scale[..., None] * x
    logterms = (logw + np.log(scale)[..., None]
                + _log_integrand(y, k[..., None], log_lam0, alpha, mean, var))
    return y, logterms


def poisson_lognormal_logpdf(k, lambda0: float, alpha: float, mean: float = 0.0, var: float = 1.0,
                             nodes: int = DEFAULT_NODES, tol: float = QUAD_TOL) -> np.ndarray:
    """``log int Poisson(k; lambda0 e^{alpha y}) N(y; mean, var) dy``.

    ``k`` may be non-integer (the factorial is ``Gamma(k + 1)``).  The node count
    is doubled until two successive rules agree to ``tol`` in log scale.
    """
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise DomainError("counts must be non-negative")
    if lambda0 <= 0.0:
        raise DomainError(f"lambda0 must be positive, got {lambda0}")
    log_lam0 = math.log(lambda0)
    if alpha == 0.0 or var == 0.0:
        lam = math.exp(log_lam0 + alpha * mean)
        return k * math.log(lam) - lam - special.gammaln(k + 1.0)
    kk = np.atleast_1d(k)
    n = nodes
    _, lt = _gh_nodes(kk, log_lam0, alpha, mean, var, n)
    prev = special.logsumexp(lt, axis=-1)
    while n < MAX_NODES:
        n *= 2
        _, lt = _gh_nodes(kk, log_lam0, alpha, mean, var, n)
        cur = special.logsumexp(lt, axis=-1)
        if np.max(np.abs(cur - prev)) < tol:
            prev = cur
            break
        prev = cur
    return prev.reshape(k.shape)


def poisson_lognormal_posterior(k, lambda0: float, alpha: float, nodes: int = DEFAULT_NODES):
    """Quadrature representation of p(y | k) under the standard-normal factor.

    Returns ``(log_marginal, y_nodes, weights)`` where ``weights`` sum to one
    along the last axis; expectations over the posterior of y are
    ``sum(weights * f(y_nodes), axis=-1)``.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    y, lt = _gh_nodes(k, math.log(lambda0), alpha, 0.0, 1.0, nodes)
    logm = special.logsumexp(lt, axis=-1)
    return logm, y, np.exp(lt - logm[..., None])


def mixture_pmf(k, ip: IntensityParams, nodes: int = DEFAULT_NODES, tol: float = QUAD_TOL):
    """P[k] for the Poisson process with log-normal intensity."""
    out = np.exp(poisson_lognormal_logpdf(k, ip.lambda0, ip.alpha, nodes=nodes, tol=tol))
    return float(out) if np.ndim(out) == 0 else out


def merton_pmf(k, params: MertonParams, grid_points: int = 20001, y_max: float = 10.0):
    """Exact finite-N count law: binomial mixed over the normal factor.

    Evaluated by the trapezoid rule on a wide uniform grid, which is spectrally
    accurate for this smooth, Gaussian-decaying integrand.
    """
    k = np.atleast_1d(np.asarray(k))
    y = np.linspace(-y_max, y_max, grid_points)
    g = conditional_pd(y, params)
    logphi = stats.norm.logpdf(y)
    logp = stats.binom.logpmf(k[:, None], params.N, g[None, :]) + logphi[None, :]
    out = integrate.trapezoid(np.exp(logp), y, axis=1)
    return out


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

def simulate_merton(params: MertonParams, kernel: CorrelationKernel, T: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Yearly default counts of the finite-N Merton model.

    ``k_t ~ Binomial(N, G(y_t))`` is exactly the sum of N indicator draws with
    i.i.d. idiosyncratic shocks.
    """
    y = sample_path(kernel, T, rng)
    return rng.binomial(params.N, conditional_pd(y, params)).astype(np.int64)


def intensity_path_recursion(ip: IntensityParams, theta: float, T: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Exponential-kernel intensities via the multiplicative recursion
    ``lam_{t+1} = lambda0^(1-theta) exp(sqrt(1-theta^2) alpha xi) lam_t^theta``."""
    xi = rng.standard_normal(T)
    lam = np.empty(T)
    lam[0] = ip.lambda0 * math.exp(ip.alpha * xi[0])
    a = ip.lambda0 ** (1.0 - theta)
    s = math.sqrt(1.0 - theta * theta) * ip.alpha
    for t in range(1, T):
        lam[t] = a * math.exp(s * xi[t]) * lam[t - 1] ** theta
    return lam


def simulate_poisson_lognormal(ip: IntensityParams, kernel: CorrelationKernel, T: int,
                               rng: np.random.Generator, method: str = "auto",
                               return_latent: bool = False):
    """Counts of the limit process, ``k_t ~ Poisson(lambda0 exp(alpha y_t))``.

    ``method``: ``"auto"`` (AR(1) recursion for exponential kernels, Cholesky
    otherwise), ``"cholesky"``, or ``"recursion"`` (exponential only, works on
    the intensities directly; no latent path is produced).
    """
    if method == "recursion":
        if kernel.family not in (EXPONENTIAL, INDEPENDENT):
            raise DomainError("the intensity recursion exists only for exponential kernels")
        lam = intensity_path_recursion(ip, kernel.param, T, rng)
        counts = rng.poisson(lam).astype(np.int64)
        return (counts, None) if return_latent else counts
    if method == "cholesky":
        y = sample_path_general(kernel, T, rng)
    elif method == "auto":
        y = sample_path(kernel, T, rng)
    else:
        raise DomainError(f"unknown sampling method {method!r}")
    counts = rng.poisson(intensity(y, ip)).astype(np.int64)
    return (counts, y) if return_latent else counts
