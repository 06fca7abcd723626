"""Parameter estimation for the Poisson model with log-normal intensity.

Workflow on yearly default counts:

1. rescale counts to a common portfolio of 3000 obligors,
2. fit (lambda0, alpha) by maximum likelihood ignoring temporal correlation,
3. back out latent factors and compute their sample ACF,
4. fit exponential / power decay to the ACF,
5. build sc-scaled normal priors from steps 2-4 and find the MAP of
   (lambda0, alpha, theta | gamma) with the latent factors y_1..y_T
   integrated out by a Laplace approximation (or, optionally, the joint
   MAP over parameters and latents).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy import optimize, special

from .errors import (ConstantSeries, DegenerateAlpha, DomainError, FitFailure,
                     NonConvergence, ZeroObligors)
from .latent import EXPONENTIAL, INDEPENDENT, POWER, CorrelationKernel, canonical_family
from .merton import poisson_lognormal_logpdf, poisson_lognormal_posterior

PORTFOLIO_SIZE = 3000
N_STARTS = 5
MAX_ITER = 500
GTOL = 1e-6
KERNEL_PARAM = {EXPONENTIAL: "theta", POWER: "gamma"}
_LOG_2PI = math.log(2.0 * math.pi)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PortfolioSeries:
    years: np.ndarray
    obligors: np.ndarray
    defaults: np.ndarray
    normalized: np.ndarray | None = None

    def __post_init__(self) -> None:
        years = np.asarray(self.years, dtype=np.int64)
        obligors = np.asarray(self.obligors, dtype=np.int64)
        defaults = np.asarray(self.defaults, dtype=np.int64)
        if not (years.shape == obligors.shape == defaults.shape) or years.ndim != 1:
            raise DomainError("years, obligors and defaults must be 1-d and of equal length")
        if np.any(defaults < 0):
            raise DomainError("default counts must be non-negative")
        if np.any(defaults > obligors):
            raise DomainError("default counts cannot exceed obligor counts")
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "obligors", obligors)
        object.__setattr__(self, "defaults", defaults)
        if self.normalized is not None:
            norm = np.asarray(self.normalized, dtype=float)
            if norm.shape != years.shape:
                raise DomainError("normalized counts must match the series length")
            object.__setattr__(self, "normalized", norm)

    def __len__(self) -> int:
        return int(self.years.size)

    @property
    def counts(self) -> np.ndarray:
        """Normalized counts k*, normalizing on the fly when needed."""
        if self.normalized is None:
            return normalize_counts(self).normalized
        return self.normalized

    def head(self, n: int) -> "PortfolioSeries":
        return PortfolioSeries(self.years[:n], self.obligors[:n], self.defaults[:n],
                               None if self.normalized is None else self.normalized[:n])

    @classmethod
    def from_counts(cls, counts, obligors: int = PORTFOLIO_SIZE, start_year: int = 1) -> "PortfolioSeries":
        """Series whose counts are already on the common-portfolio scale.

        Used for synthetic data: ``normalized`` is set to the counts as given.
        Years whose count exceeds ``obligors`` (possible for heavy-tailed
        intensities) get an obligor count equal to the default count.
        """
        counts = np.asarray(counts, dtype=np.int64)
        years = np.arange(start_year, start_year + counts.size)
        n = np.maximum(np.full(counts.size, obligors), counts)
        return cls(years, n, counts, counts.astype(float))


def normalize_counts(series: PortfolioSeries, portfolio_size: int = PORTFOLIO_SIZE) -> PortfolioSeries:
    if np.any(series.obligors <= 0):
        bad = series.years[series.obligors <= 0]
        raise ZeroObligors(f"non-positive obligor count in year(s) {bad.tolist()}")
    norm = series.defaults / series.obligors * float(portfolio_size)
    return PortfolioSeries(series.years, series.obligors, series.defaults, norm)


# --------------------------------------------------------------------------
# Independence MLE, latent back-out, ACF
# --------------------------------------------------------------------------

class MLEResult(NamedTuple):
    lambda0: float
    alpha: float
    se_lambda0: float
    se_alpha: float
    loglik: float
    converged: bool


def _mixture_negloglik(x, k):
    lam0, alpha = math.exp(x[0]), x[1]
    if alpha <= 0.0:
        lp = poisson_lognormal_logpdf(k, lam0, 0.0)
        return -float(np.sum(lp)), np.array([-float(np.sum(k - lam0)), 0.0])
    logm, y, w = poisson_lognormal_posterior(k, lam0, alpha)
    mu = lam0 * np.exp(alpha * y)
    d_lam0 = np.sum(w * (k[:, None] / lam0 - mu / lam0), axis=1)
    d_alpha = np.sum(w * (k[:, None] - mu) * y, axis=1)
    return -float(np.sum(logm)), -np.array([float(np.sum(d_lam0)) * lam0, float(np.sum(d_alpha))])


def _loglik_grad_natural(lam0, alpha, k):
    _, g = _mixture_negloglik(np.array([math.log(lam0), alpha]), k)
    return -np.array([g[0] / lam0, g[1]])


def mle_independent(series: PortfolioSeries) -> MLEResult:
    """ML fit of (lambda0, alpha) treating the latent factors as independent.

    Normalized (possibly non-integer) counts enter through ``Gamma(k + 1)``.
    Standard errors come from the inverse observed information, with the
    Hessian obtained by central differences of the analytic score.
    """
    k = np.asarray(series.counts, dtype=float)
    if k.size < 3:
        raise DomainError("need at least 3 observations")
    m, s2 = float(np.mean(k)), float(np.var(k, ddof=1))
    if m <= 0.0:
        raise FitFailure("all counts are zero; lambda0 is not identifiable")
    # method-of-moments start: Var = m + m^2 (e^{alpha^2} - 1)
    a0 = math.sqrt(math.log1p(max(s2 - m, 0.0) / m ** 2)) or 0.1
    x0 = np.array([math.log(m) - a0 ** 2 / 2.0, a0])
    res = optimize.minimize(_mixture_negloglik, x0, args=(k,), jac=True, method="L-BFGS-B",
                            bounds=[(None, None), (0.0, 20.0)],
                            options={"maxiter": MAX_ITER, "gtol": 1e-8, "ftol": 1e-14})
    if not np.all(np.isfinite(res.x)):
        raise NonConvergence("independence MLE diverged", {"message": str(res.message)})
    lam0, alpha = math.exp(res.x[0]), float(res.x[1])

    h = np.array([1e-5 * lam0, 1e-5 * max(alpha, 1.0)])
    H = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h[j]
        lo = np.array([lam0, alpha]) - e
        hi = np.array([lam0, alpha]) + e
        lo[1] = max(lo[1], 0.0)
        H[:, j] = (_loglik_grad_natural(*hi, k) - _loglik_grad_natural(*lo, k)) / (hi[j] - lo[j])
    H = 0.5 * (H + H.T)
    se = np.full(2, math.nan)
    try:
        cov = np.linalg.inv(-H)
        d = np.diag(cov)
        se = np.where(d > 0, np.sqrt(np.abs(d)), math.nan)
    except np.linalg.LinAlgError:
        pass
    return MLEResult(lam0, alpha, float(se[0]), float(se[1]), -float(res.fun), bool(res.success))


def infer_latents(series: PortfolioSeries, lambda0: float, alpha: float) -> np.ndarray:
    """Pointwise inversion ``y_t = (log(k*_t + 0.5) - log lambda0) / alpha``."""
    if alpha == 0.0:
        raise DegenerateAlpha("alpha = 0: the counts carry no information about y")
    if lambda0 <= 0.0:
        raise DomainError("lambda0 must be positive")
    k = np.asarray(series.counts if isinstance(series, PortfolioSeries) else series, dtype=float)
    return (np.log(k + 0.5) - math.log(lambda0)) / alpha


def sample_acf(path, max_lag: int) -> np.ndarray:
    """Biased sample autocorrelation r_0..r_max_lag."""
    y = np.asarray(path, dtype=float)
    T = y.size
    if not 0 < max_lag < T:
        raise DomainError(f"max_lag must lie in [1, T-1], got {max_lag} for T={T}")
    dev = y - y.mean()
    denom = float(dev @ dev)
    if denom == 0.0:
        raise ConstantSeries("series has zero variance")
    return np.array([float(dev[:T - h] @ dev[h:]) / denom for h in range(max_lag + 1)])


def default_max_lag(T: int) -> int:
    return max(1, min(20, T // 5))


@dataclass(frozen=True)
class AcfFit:
    family: str
    param: float
    se: float
    rss: float
    lags: np.ndarray
    time_constant: float | None = None  # exp(-h / tau) form, exponential family only

    def curve(self, lags) -> np.ndarray:
        return CorrelationKernel(self.family, self.param).values(np.asarray(lags))


def fit_acf(acf, family: str, max_lag: int | None = None) -> AcfFit:
    """Least-squares decay fit to the ACF in log space.

    exponential: ``log r_h = h log theta``; power: ``log r_h = -gamma log(1 + h)``.
    Both are regressions through the origin over lags 1..max_lag with
    non-positive ACF values dropped; the standard error is the regression's.
    """
    family = canonical_family(family)
    if family == INDEPENDENT:
        raise DomainError("fit_acf needs the exponential or power family")
    r = np.asarray(acf, dtype=float)
    if not math.isclose(r[0], 1.0, abs_tol=1e-12):
        raise DomainError("acf[0] must equal 1")
    if max_lag is None:
        max_lag = r.size - 1
    if max_lag < 2 or max_lag >= r.size:
        raise DomainError(f"max_lag must lie in [2, {r.size - 1}], got {max_lag}")
    lags = np.arange(1, max_lag + 1)
    vals = r[1:max_lag + 1]
    keep = vals > 0
    if keep.sum() < 2:
        raise FitFailure("fewer than two positive ACF values to fit")
    lags, vals = lags[keep], vals[keep]
    x = lags.astype(float) if family == EXPONENTIAL else np.log1p(lags)
    z = np.log(vals)
    sxx = float(x @ x)
    slope = float(x @ z) / sxx
    resid = z - slope * x
    n = x.size
    s2 = float(resid @ resid) / (n - 1) if n > 1 else 0.0
    se_slope = math.sqrt(s2 / sxx)
    if family == EXPONENTIAL:
        theta = math.exp(slope)
        fitted = theta ** lags
        tau = -1.0 / slope if slope < 0 else math.inf
        rss = float(np.sum((vals - fitted) ** 2))
        return AcfFit(EXPONENTIAL, theta, theta * se_slope, rss, lags, tau)
    gamma = -slope
    rss = float(np.sum((vals - (1.0 + lags) ** -gamma) ** 2))
    return AcfFit(POWER, gamma, se_slope, rss, lags)


# --------------------------------------------------------------------------
# Priors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalPrior:
    mean: float
    sd: float

    def __post_init__(self) -> None:
        if not self.sd > 0:
            raise DomainError(f"prior sd must be positive, got {self.sd}")

    def logpdf(self, x: float) -> float:
        if math.isinf(self.sd):
            return 0.0
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * _LOG_2PI

    def dlogpdf(self, x: float) -> float:
        return 0.0 if math.isinf(self.sd) else -(x - self.mean) / self.sd ** 2

    def d2logpdf(self, x: float) -> float:
        return 0.0 if math.isinf(self.sd) else -1.0 / self.sd ** 2

    def to_dict(self) -> dict:
        return {"dist": "normal", "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate); used for conjugate sanity checks on lambda0."""

    shape: float
    rate: float

    def __post_init__(self) -> None:
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError("gamma prior needs positive shape and rate")

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return (self.shape * math.log(self.rate) - special.gammaln(self.shape)
                + (self.shape - 1.0) * math.log(x) - self.rate * x)

    def dlogpdf(self, x: float) -> float:
        return (self.shape - 1.0) / x - self.rate

    def d2logpdf(self, x: float) -> float:
        return -(self.shape - 1.0) / x ** 2

    def to_dict(self) -> dict:
        return {"dist": "gamma", "shape": self.shape, "rate": self.rate}


FLAT = NormalPrior(0.0, math.inf)


@dataclass(frozen=True)
class PriorSpec:
    """Per-parameter priors; parameters not listed are flat."""

    priors: dict = field(default_factory=dict)
    sc: float = 1.0

    def __post_init__(self) -> None:
        if not self.sc > 0:
            raise DomainError("sc must be positive")

    def get(self, name: str):
        return self.priors.get(name, FLAT)

    @classmethod
    def from_estimates(cls, estimates: dict, sc: float) -> "PriorSpec":
        """``param ~ N(estimate, (sc * se)^2)`` from ``{name: (estimate, se)}``."""
        return cls({name: NormalPrior(float(m), sc * float(se)) for name, (m, se) in estimates.items()}, sc)

    @classmethod
    def flat(cls) -> "PriorSpec":
        return cls({}, 1.0)

    def to_dict(self) -> dict:
        return {"sc": self.sc, "priors": {k: v.to_dict() for k, v in sorted(self.priors.items())}}


# --------------------------------------------------------------------------
# Joint posterior over parameters and latent factors
# --------------------------------------------------------------------------

def _kernel_param_bounds(family: str):
    return (0.0, 1.0) if family == EXPONENTIAL else (0.0, math.inf)


class LatentPoissonModel:
    """Log joint density of ``(params, y)`` given normalized counts.

    ``log p = tau * sum_t [k_t (log lambda0 + alpha y_t) - lambda0 e^{alpha y_t}
    - log Gamma(k_t + 1)] + log N_T(y; 0, Sigma(kernel)) + sum log prior(param)``

    ``tau`` is the likelihood temperature (1 for the posterior, 1/log T for
    WBIC).  Optimization and sampling work on unconstrained coordinates
    ``z = (log lambda0, log alpha, logit theta | log gamma, y)``.
    """

    def __init__(self, counts, family: str, priors: PriorSpec | None = None,
                 fixed: dict | None = None, temperature: float = 1.0):
        self.k = np.asarray(counts, dtype=float)
        if self.k.ndim != 1 or self.k.size < 1 or np.any(self.k < 0):
            raise DomainError("counts must be a non-empty 1-d array of non-negative values")
        self.T = self.k.size
        self.family = canonical_family(family)
        self.priors = priors or PriorSpec.flat()
        self.fixed = dict(fixed or {})
        if not temperature > 0:
            raise DomainError("temperature must be positive")
        self.temperature = float(temperature)
        names = ["lambda0", "alpha"]
        if self.family in KERNEL_PARAM:
            names.append(KERNEL_PARAM[self.family])
        self.param_names = tuple(names)
        self.free = tuple(n for n in names if n not in self.fixed)
        self.n_free = len(self.free)
        self.dim = self.n_free + self.T
        self._lgk = special.gammaln(self.k + 1.0)
        self._chol_cache: dict[float, tuple[np.ndarray, float]] = {}

    # -- coordinates -------------------------------------------------------
    def params_from_z(self, z) -> dict:
        p = dict(self.fixed)
        for i, name in enumerate(self.free):
            p[name] = float(special.expit(z[i])) if name == "theta" else math.exp(z[i])
        return p

    def z_from_params(self, params: dict, y) -> np.ndarray:
        head = []
        for name in self.free:
            v = params[name]
            head.append(float(special.logit(v)) if name == "theta" else math.log(v))
        return np.concatenate([np.array(head), np.asarray(y, dtype=float)])

    def _dparam_dz(self, params: dict) -> np.ndarray:
        out = []
        for name in self.free:
            v = params[name]
            out.append(v * (1.0 - v) if name == "theta" else v)
        return np.array(out)

    def log_jacobian(self, params: dict) -> float:
        return float(np.sum(np.log(self._dparam_dz(params))))

    def kernel(self, params: dict) -> CorrelationKernel:
        if self.family == INDEPENDENT:
            return CorrelationKernel.independent()
        return CorrelationKernel(self.family, params[KERNEL_PARAM[self.family]])

    # -- pieces ------------------------------------------------------------
    def pointwise_loglik(self, params: dict, y) -> np.ndarray:
        eta = math.log(params["lambda0"]) + params["alpha"] * np.asarray(y)
        return self.k * eta - np.exp(eta) - self._lgk

    def _power_chol(self, gamma: float):
        hit = self._chol_cache.get(gamma)
        if hit is None:
            from .latent import kernel_cholesky
            L = kernel_cholesky(CorrelationKernel.power(gamma), self.T)
            hit = (L, 2.0 * float(np.sum(np.log(np.diag(L)))))
            if len(self._chol_cache) > 16:
                self._chol_cache.clear()
            self._chol_cache[gamma] = hit
        return hit

    def latent_logpdf(self, kparam: float | None, y, with_grad: bool = False):
        """``log N_T(y; 0, Sigma)`` and optionally ``-Sigma^{-1} y``."""
        y = np.asarray(y, dtype=float)
        T = self.T
        if self.family == INDEPENDENT:
            val = -0.5 * float(y @ y) - 0.5 * T * _LOG_2PI
            return (val, -y) if with_grad else val
        if self.family == EXPONENTIAL:
            th = kparam
            s = 1.0 - th * th
            e = y[1:] - th * y[:-1]
            q = y[0] ** 2 + float(e @ e) / s
            val = -0.5 * q - 0.5 * (T - 1) * math.log(s) - 0.5 * T * _LOG_2PI
            if not with_grad:
                return val
            r = np.zeros(T)  # Sigma^{-1} y for the AR(1) precision (tridiagonal)
            r[0] = y[0]
            r[1:] += e / s
            r[:-1] -= th * e / s
            return val, -r
        L, logdet = self._power_chol(kparam)
        u = scipy.linalg.solve_triangular(L, y, lower=True)
        val = -0.5 * float(u @ u) - 0.5 * logdet - 0.5 * T * _LOG_2PI
        if not with_grad:
            return val
        r = scipy.linalg.solve_triangular(L.T, u, lower=False)
        return val, -r

    def latent_precision(self, kparam: float | None) -> np.ndarray:
        T = self.T
        if self.family == INDEPENDENT:
            return np.eye(T)
        if self.family == EXPONENTIAL:
            th = kparam
            s = 1.0 - th * th
            diag = np.full(T, (1.0 + th * th) / s)
            diag[0] = diag[-1] = 1.0 / s
            if T == 1:
                diag[0] = 1.0
            P = np.diag(diag)
            idx = np.arange(T - 1)
            P[idx, idx + 1] = P[idx + 1, idx] = -th / s
            return P
        L, _ = self._power_chol(kparam)
        Linv = scipy.linalg.solve_triangular(L, np.eye(T), lower=True)
        return Linv.T @ Linv

    def _kparam_step(self, v: float) -> float:
        h = 1e-6 * max(1.0, abs(v))
        if self.family == EXPONENTIAL:
            h = min(h, 0.5 * v, 0.5 * (1.0 - v))
        else:
            h = min(h, 0.5 * v)
        return h

    def log_prior(self, params: dict) -> float:
        return float(sum(self.priors.get(n).logpdf(params[n]) for n in self.free))

    def log_density(self, params: dict, y) -> float:
        """Natural-scale log joint density (the MAP objective)."""
        kp = params.get(KERNEL_PARAM.get(self.family, ""), None)
        ll = float(np.sum(self.pointwise_loglik(params, y)))
        return self.temperature * ll + self.latent_logpdf(kp, y) + self.log_prior(params)

    def grad_natural(self, params: dict, y):
        """Value and gradient w.r.t. (free params, y) on the natural scale.

        Analytic in lambda0, alpha and y; central difference in the kernel
        parameter.
        """
        y = np.asarray(y, dtype=float)
        tau = self.temperature
        lam0, alpha = params["lambda0"], params["alpha"]
        ey = np.exp(alpha * y)
        mu = lam0 * ey
        resid = self.k - mu
        kname = KERNEL_PARAM.get(self.family)
        kp = params.get(kname) if kname else None
        lat, dlat = self.latent_logpdf(kp, y, with_grad=True)
        ll = float(np.sum(self.k * (math.log(lam0) + alpha * y) - mu - self._lgk))
        value = tau * ll + lat + self.log_prior(params)
        g = np.empty(self.dim)
        for i, name in enumerate(self.free):
            prior = self.priors.get(name)
            if name == "lambda0":
                g[i] = tau * float(np.sum(self.k / lam0 - ey))
            elif name == "alpha":
                g[i] = tau * float(resid @ y)
            else:
                h = self._kparam_step(kp)
                g[i] = (self.latent_logpdf(kp + h, y) - self.latent_logpdf(kp - h, y)) / (2.0 * h)
            g[i] += prior.dlogpdf(params[name])
        g[self.n_free:] = tau * alpha * resid + dlat
        return value, g

    def hessian_natural(self, params: dict, y) -> np.ndarray:
        """Hessian w.r.t. (free params, y); analytic except the kernel column."""
        y = np.asarray(y, dtype=float)
        tau = self.temperature
        lam0, alpha = params["lambda0"], params["alpha"]
        ey = np.exp(alpha * y)
        mu = lam0 * ey
        nf = self.n_free
        H = np.zeros((self.dim, self.dim))
        kname = KERNEL_PARAM.get(self.family)
        kp = params.get(kname) if kname else None
        H[nf:, nf:] = -self.latent_precision(kp)
        H[nf:, nf:][np.diag_indices(self.T)] -= tau * alpha * alpha * mu
        ix = {n: i for i, n in enumerate(self.free)}
        if "lambda0" in ix:
            i = ix["lambda0"]
            H[i, i] = -tau * float(np.sum(self.k)) / lam0 ** 2
            H[i, nf:] = H[nf:, i] = -tau * alpha * ey
        if "alpha" in ix:
            i = ix["alpha"]
            H[i, i] = -tau * float(np.sum(mu * y * y))
            H[i, nf:] = H[nf:, i] = tau * (self.k - mu - alpha * y * mu)
        if "lambda0" in ix and "alpha" in ix:
            H[ix["lambda0"], ix["alpha"]] = H[ix["alpha"], ix["lambda0"]] = -tau * float(np.sum(y * ey))
        if kname in ix:
            i = ix[kname]
            h = 1e3 * self._kparam_step(kp)
            lo, hi = dict(params), dict(params)
            lo[kname], hi[kname] = kp - h, kp + h
            col = (self.grad_natural(hi, y)[1] - self.grad_natural(lo, y)[1]) / (2.0 * h)
            H[:, i] = col
            H[i, :] = col
        for n, i in ix.items():
            H[i, i] += self.priors.get(n).d2logpdf(params[n]) if n != kname else 0.0
        return H

    # -- unconstrained coordinates ----------------------------------------
    def objective_z(self, z, jacobian: bool = False):
        """Value and gradient in z; ``jacobian=True`` adds the log-Jacobian (sampling target)."""
        params = self.params_from_z(z)
        y = z[self.n_free:]
        value, g = self.grad_natural(params, y)
        dp = self._dparam_dz(params)
        g[:self.n_free] *= dp
        if jacobian:
            value += float(np.sum(np.log(dp)))
            for i, name in enumerate(self.free):
                v = params[name]
                g[i] += 1.0 - 2.0 * v if name == "theta" else 1.0
        return value, g

    def log_target(self, z) -> float:
        params = self.params_from_z(z)
        if any(not math.isfinite(params[n]) or params[n] <= 0 for n in self.free):
            return -math.inf
        if "theta" in params and params["theta"] >= 1.0:
            return -math.inf
        try:
            return self.log_density(params, z[self.n_free:]) + self.log_jacobian(params)
        except (FloatingPointError, OverflowError, np.linalg.LinAlgError):
            return -math.inf

    def initial_latents(self, params: dict) -> np.ndarray:
        """Per-term Newton solve of the latent mode with the kernel ignored."""
        lam0, alpha = params["lambda0"], params["alpha"]
        if alpha <= 0:
            return np.zeros(self.T)
        y = np.clip((np.log(self.k + 0.5) - math.log(lam0)) / alpha, -4.0, 4.0)
        for _ in range(50):
            mu = lam0 * np.exp(alpha * y)
            g1 = self.temperature * alpha * (self.k - mu) - y
            g2 = -self.temperature * alpha * alpha * mu - 1.0
            y = y - g1 / g2
        return y

    # -- Laplace approximation over the latent factors ---------------------
    def covariance(self, params: dict) -> np.ndarray:
        from .latent import build_correlation_matrix
        return build_correlation_matrix(self.kernel(params), self.T)

    def laplace(self, params: dict, y0=None, tol: float = 1e-10, maxiter: int = 200) -> "LaplaceState":
        """Conditional mode of y and the Laplace log marginal posterior of ``params``.

        Newton iterations in the form that only needs Sigma (never its
        inverse), with step halving on ``-1/2 y' Sigma^{-1} y + tau * loglik``.
        """
        tau = self.temperature
        lam0, alpha = params["lambda0"], params["alpha"]
        K = self.covariance(params)
        T = self.T
        log_lam0 = math.log(lam0)
        k = self.k

        def psi(a, f):
            return -0.5 * float(a @ f) + tau * float(np.sum(k * (log_lam0 + alpha * f) - np.exp(log_lam0 + alpha * f)))

        if y0 is None:
            f = self.initial_latents(params)
        else:
            f = np.asarray(y0, dtype=float).copy()
        try:
            a = scipy.linalg.cho_solve(scipy.linalg.cho_factor(K + 1e-10 * np.eye(T), lower=True), f)
            f = K @ a
        except np.linalg.LinAlgError:
            a = np.zeros(T)
            f = np.zeros(T)
        cur = psi(a, f)
        n_iter = 0
        for n_iter in range(1, maxiter + 1):
            mu = np.exp(log_lam0 + alpha * f)
            W = tau * alpha * alpha * mu
            sW = np.sqrt(W)
            L = np.linalg.cholesky(np.eye(T) + sW[:, None] * K * sW[None, :])
            b = W * f + tau * alpha * (k - mu)
            c = scipy.linalg.solve_triangular(L, sW * (K @ b), lower=True)
            a_new = b - sW * scipy.linalg.solve_triangular(L.T, c, lower=False)
            step = 1.0
            while True:
                a_try = a + step * (a_new - a)
                f_try = K @ a_try
                new = psi(a_try, f_try)
                if new >= cur - 1e-12 * abs(cur) or step < 1e-8:
                    break
                step *= 0.5
            df = float(np.max(np.abs(f_try - f)))
            a, f, gain, cur = a_try, f_try, new - cur, new
            if df < tol and abs(gain) < 1e-9 * max(1.0, abs(cur)):
                break
        mu = np.exp(log_lam0 + alpha * f)
        W = tau * alpha * alpha * mu
        sW = np.sqrt(W)
        L = np.linalg.cholesky(np.eye(T) + sW[:, None] * K * sW[None, :])
        ll = float(np.sum(self.pointwise_loglik(params, f)))
        value = -0.5 * float(a @ f) + tau * ll - float(np.sum(np.log(np.diag(L)))) + self.log_prior(params)
        return LaplaceState(dict(params), f, value, K, W, L, a, n_iter)

    def _laplace_at(self, params: dict, name: str, v: float, y0) -> "LaplaceState":
        p = dict(params)
        p[name] = v
        return self.laplace(p, y0=y0)

    def laplace_grad(self, st: "LaplaceState"):
        """Gradient of the Laplace objective w.r.t. the free natural parameters.

        Implicit differentiation through the mode for lambda0 and alpha,
        central difference (with re-solved modes) for the kernel parameter.
        Also returns d y_hat / d param as columns.
        """
        tau = self.temperature
        p = st.params
        lam0, alpha = p["lambda0"], p["alpha"]
        y, K, L = st.y, st.K, st.L
        e = np.exp(alpha * y)
        mu = lam0 * e
        sW = np.sqrt(st.W)
        V = scipy.linalg.solve_triangular(L, sW[:, None] * K, lower=True)
        ainv_diag = np.diag(K) - np.sum(V * V, axis=0)

        def ainv(v):
            return K @ v - V.T @ (V @ v)

        # sensitivity of -1/2 log det A to the mode
        s2 = -0.5 * ainv_diag * tau * alpha ** 3 * mu
        grad = np.empty(self.n_free)
        dy = np.empty((self.T, self.n_free))
        kname = KERNEL_PARAM.get(self.family)
        for i, name in enumerate(self.free):
            prior = self.priors.get(name)
            if name == "lambda0":
                explicit = tau * float(np.sum(self.k / lam0 - e)) - 0.5 * float(ainv_diag @ (tau * alpha ** 2 * e))
                dy[:, i] = ainv(-tau * alpha * e)
                grad[i] = explicit + float(s2 @ dy[:, i]) + prior.dlogpdf(lam0)
            elif name == "alpha":
                explicit = (tau * float((self.k - mu) @ y)
                            - 0.5 * float(ainv_diag @ (tau * (2.0 * alpha * mu + alpha ** 2 * mu * y))))
                dy[:, i] = ainv(tau * (self.k - mu - alpha * y * mu))
                grad[i] = explicit + float(s2 @ dy[:, i]) + prior.dlogpdf(alpha)
            else:
                kp = p[kname]
                h = 1e2 * self._kparam_step(kp)
                hi = self._laplace_at(p, kname, kp + h, y)
                lo = self._laplace_at(p, kname, kp - h, y)
                # log prior is part of both values; its FD equals its derivative
                grad[i] = (hi.value - lo.value) / (2.0 * h)
                dy[:, i] = (hi.y - lo.y) / (2.0 * h)
        return grad, dy

    def laplace_objective_z(self, z_params, y0=None):
        params = self.params_from_z(np.concatenate([z_params, np.zeros(self.T)]))
        st = self.laplace(params, y0=y0)
        g, _ = self.laplace_grad(st)
        return st, g * self._dparam_dz(params)


@dataclass
class LaplaceState:
    params: dict
    y: np.ndarray
    value: float
    K: np.ndarray
    W: np.ndarray
    L: np.ndarray
    a: np.ndarray
    n_iter: int


# --------------------------------------------------------------------------
# MAP estimation
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    family: str
    estimates: dict
    std_errors: dict
    latent: np.ndarray
    objective: float
    converged: bool
    n_iter: int = 0
    grad_norm: float = math.nan
    message: str = ""
    priors: PriorSpec | None = None
    covariance_z: np.ndarray | None = field(default=None, repr=False)
    method: str = "laplace"
    joint_objective: float = math.nan

    def kernel(self) -> CorrelationKernel:
        if self.family == INDEPENDENT:
            return CorrelationKernel.independent()
        return CorrelationKernel(self.family, self.estimates[KERNEL_PARAM[self.family]])

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "estimates": {k: float(v) for k, v in self.estimates.items()},
            "std_errors": {k: float(v) for k, v in self.std_errors.items()},
            "latent": [float(v) for v in self.latent],
            "objective": float(self.objective),
            "joint_objective": float(self.joint_objective),
            "method": self.method,
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "grad_norm": float(self.grad_norm),
            "message": self.message,
            "priors": None if self.priors is None else self.priors.to_dict(),
        }


def _default_init(model: LatentPoissonModel) -> dict:
    init = {}
    for name in model.param_names:
        if name in model.fixed:
            continue
        prior = model.priors.get(name)
        m = getattr(prior, "mean", None)
        if isinstance(prior, GammaPrior):
            m = prior.shape / prior.rate
        if m is None or not math.isfinite(m) or math.isinf(getattr(prior, "sd", 0.0)):
            m = {"lambda0": max(float(np.mean(model.k)), 0.5), "alpha": 1.0,
                 "theta": 0.5, "gamma": 0.5}[name]
        lo, hi = (0.0, 1.0) if name == "theta" else (0.0, math.inf)
        m = min(max(m, lo + 1e-3), hi - 1e-3) if name == "theta" else max(m, 1e-3)
        init[name] = m
    return init


def _run_lbfgs(model: LatentPoissonModel, z0: np.ndarray, maxiter: int, gtol: float, trace: list | None):
    def fun(z):
        v, g = model.objective_z(z)
        if not math.isfinite(v):
            return math.inf, np.zeros_like(z)
        return -v, -g

    cb = None
    if trace is not None:
        def cb(zk):
            trace.append(model.objective_z(zk)[0])
    with np.errstate(over="ignore", invalid="ignore"):
        return optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", callback=cb,
                                 options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-14,
                                          "maxcor": 20, "maxls": 50})


def profile_standard_errors(model: LatentPoissonModel, params: dict, y) -> tuple[dict, np.ndarray | None]:
    """Parameter SEs from the inverse negative Hessian (latents profiled out)."""
    H = model.hessian_natural(params, y)
    H = 0.5 * (H + H.T)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return {n: math.nan for n in model.free}, None
    d = np.diag(cov)[:model.n_free]
    ses = {n: (math.sqrt(v) if v > 0 else math.nan) for n, v in zip(model.free, d)}
    return ses, cov


def _laplace_hessian(model: LatentPoissonModel, st: LaplaceState) -> np.ndarray:
    """Natural-scale Hessian of the Laplace objective by differencing its gradient."""
    n = model.n_free
    H = np.empty((n, n))
    for j, name in enumerate(model.free):
        v = st.params[name]
        h = 1e-4 * max(abs(v), 1e-2)
        if name == "theta":
            h = min(h, 0.5 * v, 0.5 * (1.0 - v))
        cols = []
        for sgn in (1.0, -1.0):
            p = dict(st.params)
            p[name] = v + sgn * h
            cols.append(model.laplace_grad(model.laplace(p, y0=st.y))[0])
        H[:, j] = (cols[0] - cols[1]) / (2.0 * h)
    return 0.5 * (H + H.T)


def _map_laplace(model: LatentPoissonModel, z_base: np.ndarray, rng, n_starts, maxiter, gtol, trace):
    warm = {"y": None}

    def fun(zp):
        try:
            st, g = model.laplace_objective_z(zp, y0=warm["y"])
        except (np.linalg.LinAlgError, FloatingPointError, OverflowError, ValueError, DomainError):
            return math.inf, np.zeros_like(zp)
        if not math.isfinite(st.value) or not np.all(np.isfinite(g)):
            return math.inf, np.zeros_like(zp)
        warm["y"] = st.y
        return -st.value, -g

    best, failures = None, []
    for s in range(max(1, n_starts)):
        z0 = z_base.copy()
        if s > 0:
            z0 += 0.1 * rng.standard_normal(z0.size)
        warm["y"] = None
        cb = None
        if trace is not None and s == 0:
            def cb(zk):
                trace.append(-fun(zk)[0])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", callback=cb,
                                    options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-14,
                                             "maxcor": 20, "maxls": 50})
        if not np.isfinite(res.fun):
            failures.append(str(res.message))
            continue
        if best is None or res.fun < best.fun:
            best = res
    return best, failures


def map_estimate(series, family: str, priors: PriorSpec | None = None, init: dict | None = None,
                 rng: np.random.Generator | None = None, n_starts: int = N_STARTS,
                 fixed: dict | None = None, temperature: float = 1.0, maxiter: int = MAX_ITER,
                 gtol: float = GTOL, trace: list | None = None, method: str = "laplace") -> FitResult:
    """MAP estimate of the parameters, best of ``n_starts`` starts.

    ``method="laplace"`` (default) maximizes the posterior of the parameters
    with the latent factors integrated out by a Laplace approximation; the
    reported latents are their conditional mode.  ``method="joint"``
    maximizes the joint density over parameters and latents together, which
    is unbounded in alpha when the priors are weak (alpha -> inf, y -> 0).

    The first start is the supplied ``init`` (or prior means); the others are
    jittered by N(0, 0.1^2) on the unconstrained scale.  Raises
    :class:`NonConvergence` if no start produces a finite optimum.
    """
    if method not in ("laplace", "joint"):
        raise DomainError(f"unknown MAP method {method!r}")
    counts = series.counts if isinstance(series, PortfolioSeries) else np.asarray(series, dtype=float)
    model = LatentPoissonModel(counts, family, priors, fixed=fixed, temperature=temperature)
    rng = rng if rng is not None else np.random.default_rng(0)
    base = _default_init(model)
    if init:
        base.update({k: v for k, v in init.items() if k in model.free})
    full = {**model.fixed, **base}
    y0 = init.get("latent") if init and "latent" in init else model.initial_latents(full)
    z_base = model.z_from_params(full, y0)
    nf = model.n_free

    if method == "laplace":
        best, failures = _map_laplace(model, z_base[:nf], rng, n_starts, maxiter, gtol, trace)
    else:
        best, failures = None, []
        for s in range(max(1, n_starts)):
            z0 = z_base.copy()
            if s > 0:
                z0[:nf] += 0.1 * rng.standard_normal(nf)
                z0[nf:] += 0.1 * rng.standard_normal(model.T)
            res = _run_lbfgs(model, z0, maxiter, gtol, trace if s == 0 else None)
            if not np.isfinite(res.fun):
                failures.append(str(res.message))
                continue
            if best is None or res.fun < best.fun:
                best = res
    if best is None:
        raise NonConvergence(f"MAP failed from all {n_starts} starts", {"messages": failures})

    if method == "laplace":
        st, gz = model.laplace_objective_z(best.x)
        params, y = st.params, st.y
        value = st.value
        ses, cov_z = _laplace_uncertainty(model, st)
    else:
        params = model.params_from_z(best.x)
        y = best.x[nf:].copy()
        value, g = model.grad_natural(params, y)
        _, gz = model.objective_z(best.x)
        ses, _ = profile_standard_errors(model, params, y)
        # covariance on the unconstrained scale, used to precondition samplers
        J = np.concatenate([model._dparam_dz(params), np.ones(model.T)])
        Hz = model.hessian_natural(params, y) * np.outer(J, J)
        Hz[np.diag_indices(nf)] += g[:nf] * _d2param_dz2(model, params)
        try:
            cov_z = np.linalg.inv(-0.5 * (Hz + Hz.T))
        except np.linalg.LinAlgError:
            cov_z = None
    estimates = {n: params[n] for n in model.param_names}
    return FitResult(
        family=model.family,
        estimates=estimates,
        std_errors={n: ses.get(n, 0.0) for n in model.param_names},
        latent=np.asarray(y, dtype=float).copy(),
        objective=float(value),
        converged=bool(best.success) and math.isfinite(value),
        n_iter=int(best.nit),
        grad_norm=float(np.max(np.abs(gz))) if nf else 0.0,
        message=str(best.message),
        priors=model.priors,
        covariance_z=cov_z,
        method=method,
        joint_objective=float(model.log_density(params, y)),
    )


def _laplace_uncertainty(model: LatentPoissonModel, st: LaplaceState):
    """Parameter SEs and a joint (params, y) covariance on the z scale."""
    nf = model.n_free
    nan = {n: math.nan for n in model.free}
    if nf == 0:
        ses, cov_p = {}, np.zeros((0, 0))
    else:
        H = _laplace_hessian(model, st)
        try:
            cov_p = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            return nan, None
        d = np.diag(cov_p)
        ses = {n: (math.sqrt(v) if v > 0 else math.nan) for n, v in zip(model.free, d)}
    # conditional covariance of y at the mode: A^{-1} = K - V'V
    sW = np.sqrt(st.W)
    V = scipy.linalg.solve_triangular(st.L, sW[:, None] * st.K, lower=True)
    cov_y = st.K - V.T @ V
    if nf == 0:
        return ses, cov_y
    _, dy = model.laplace_grad(st)
    J = model._dparam_dz(st.params)
    cov_zp = cov_p / np.outer(J, J)
    D = dy * J[None, :]
    cov = np.empty((nf + model.T, nf + model.T))
    cov[:nf, :nf] = cov_zp
    cov[nf:, :nf] = D @ cov_zp
    cov[:nf, nf:] = cov[nf:, :nf].T
    cov[nf:, nf:] = cov_y + D @ cov_zp @ D.T
    if np.any(np.diag(cov_zp) <= 0):
        return ses, None
    return ses, 0.5 * (cov + cov.T)


def _d2param_dz2(model: LatentPoissonModel, params: dict) -> np.ndarray:
    out = []
    for name in model.free:
        v = params[name]
        out.append(v * (1.0 - v) * (1.0 - 2.0 * v) if name == "theta" else v)
    return np.array(out)


# --------------------------------------------------------------------------
# Preliminary workflow and prior construction
# --------------------------------------------------------------------------

@dataclass
class PreliminaryEstimates:
    mle: MLEResult
    latent: np.ndarray
    acf: np.ndarray
    exponential: AcfFit
    power: AcfFit

    def to_dict(self) -> dict:
        def fit(f: AcfFit) -> dict:
            d = {"param": f.param, "se": f.se, "rss": f.rss}
            if f.time_constant is not None:
                d["time_constant"] = f.time_constant
            return d
        return {
            "mle": {"lambda0": self.mle.lambda0, "alpha": self.mle.alpha,
                    "se_lambda0": self.mle.se_lambda0, "se_alpha": self.mle.se_alpha,
                    "loglik": self.mle.loglik, "converged": self.mle.converged},
            "acf": [float(v) for v in self.acf],
            "acf_exponential": fit(self.exponential),
            "acf_power": fit(self.power),
        }


def preliminary_estimates(series: PortfolioSeries, max_lag: int | None = None) -> PreliminaryEstimates:
    mle = mle_independent(series)
    if mle.alpha <= 1e-8:
        raise DegenerateAlpha("independence MLE found no overdispersion (alpha ~ 0)")
    y = infer_latents(series, mle.lambda0, mle.alpha)
    max_lag = max_lag or default_max_lag(len(series))
    max_lag = max(2, min(max_lag, len(series) - 1))
    acf = sample_acf(y, max_lag)
    return PreliminaryEstimates(mle, y, acf, fit_acf(acf, EXPONENTIAL, max_lag),
                                fit_acf(acf, POWER, max_lag))


def _usable_se(estimate: float, se: float) -> float:
    # non-finite or vanishing SEs would give a degenerate prior
    floor = max(0.01 * abs(estimate), 1e-3)
    if not math.isfinite(se) or se < floor:
        return floor
    return se


def build_priors(prelim: PreliminaryEstimates, family: str, sc: float) -> PriorSpec:
    family = canonical_family(family)
    m = prelim.mle
    est = {"lambda0": (m.lambda0, _usable_se(m.lambda0, m.se_lambda0)),
           "alpha": (m.alpha, _usable_se(m.alpha, m.se_alpha))}
    if family == EXPONENTIAL:
        f = prelim.exponential
        est["theta"] = (min(max(f.param, 0.01), 0.99), _usable_se(f.param, f.se))
    elif family == POWER:
        f = prelim.power
        est["gamma"] = (max(f.param, 0.01), _usable_se(f.param, f.se))
    return PriorSpec.from_estimates(est, sc)


def prior_init(priors: PriorSpec, family: str) -> dict:
    names = ["lambda0", "alpha"] + ([KERNEL_PARAM[family]] if family in KERNEL_PARAM else [])
    return {n: priors.get(n).mean for n in names if math.isfinite(getattr(priors.get(n), "sd", math.inf))}
