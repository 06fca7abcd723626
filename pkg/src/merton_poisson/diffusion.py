"""Variance scaling of aggregated intensities and the super-normal transition.

For intensities with common variance ``V_bar`` and correlation ``d_i`` the
aggregate over T terms has variance ``T V_bar + 2 V_bar sum_{i<T} d_i (T - i)``.
Normal diffusion means this grows like T; power decay with gamma < 1 makes it
grow like T^(2 - gamma) (T log T at gamma = 1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientPoints
from .latent import EXPONENTIAL, INDEPENDENT, POWER, CorrelationKernel
from .merton import IntensityParams, intensity_moments


class PhaseLabel(enum.Enum):
    NORMAL = "normal"
    CRITICAL = "critical"
    SUPER_NORMAL = "super_normal"


class Divergence(enum.Enum):
    FINITE = "finite"
    LOG = "log"
    POWER_LAW = "power_law"


@dataclass(frozen=True)
class ScalingCurve:
    horizons: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.horizons)
        v = np.asarray(self.values, dtype=float)
        if h.shape != v.shape:
            raise DomainError("horizons and values must have equal length")
        if np.any(np.diff(h) <= 0):
            raise DomainError("horizons must be strictly increasing")
        if np.any(v <= 0):
            raise DomainError("scaling values must be positive")
        object.__setattr__(self, "horizons", h)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ImpactResult:
    value: float
    divergence: Divergence
    growth_exponent: float = 0.0  # T**growth_exponent for POWER_LAW, 0 otherwise


def aggregate_variance(kernel: CorrelationKernel, T: int, V_bar: float) -> float:
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if V_bar < 0:
        raise DomainError("V_bar must be non-negative")
    i = np.arange(1, T)
    corr = float(np.sum(kernel.values(i) * (T - i))) if T > 1 else 0.0
    return V_bar * (T + 2.0 * corr)


def aggregate_variance_exact(kernel: CorrelationKernel, T: int, ip: IntensityParams) -> float:
    """Exact variance of ``sum_t lambda(y_t)`` for jointly log-normal intensities.

    ``Cov(lambda_s, lambda_t) = lambda_bar^2 (exp(alpha^2 d_|s-t|) - 1)``.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    lam_bar, _ = intensity_moments(ip)
    a2 = ip.alpha ** 2
    i = np.arange(1, T)
    off = np.sum(np.expm1(a2 * kernel.values(i)) * (T - i)) if T > 1 else 0.0
    return lam_bar ** 2 * (T * math.expm1(a2) + 2.0 * off)


def scaling_curve(kernel: CorrelationKernel, T_max: int, V_bar: float = 1.0) -> ScalingCurve:
    """Variance of the sample mean relative to V_bar at dyadic horizons.

    ``values[j] = aggregate_variance(T_j) / T_j**2 / V_bar``; V_bar cancels, so
    the curve is the same for every positive V_bar.
    """
    if T_max < 2:
        raise DomainError(f"T_max must be >= 2, got {T_max}")
    if V_bar < 0:
        raise DomainError("V_bar must be non-negative")
    horizons = 2 ** np.arange(int(math.floor(math.log2(T_max))) + 1)
    values = np.array([aggregate_variance(kernel, int(T), 1.0) / float(T) ** 2 for T in horizons])
    return ScalingCurve(horizons=horizons, values=values)


def scaling_exponent(curve: ScalingCurve) -> list[tuple[int, float]]:
    """Finite-size exponent ``delta = log2(v(T) / v(2T))`` for each dyadic pair."""
    h, v = curve.horizons, curve.values
    if h.size < 2:
        raise InsufficientPoints("need at least two dyadic horizons")
    if np.any(h[1:] != 2 * h[:-1]):
        raise InsufficientPoints("horizons must be successive powers of two")
    return [(int(h[j]), float(np.log2(v[j] / v[j + 1]))) for j in range(h.size - 1)]


def delta_at(kernel: CorrelationKernel, T: int) -> float:
    """delta at one horizon without building the full curve."""
    vT = aggregate_variance(kernel, T, 1.0) / T ** 2
    v2T = aggregate_variance(kernel, 2 * T, 1.0) / (2 * T) ** 2
    return float(math.log2(vT / v2T))


def log_correction_delta(T: int) -> float:
    """The gamma = 1 upper estimate ``1 - log2(1 + 2 / log2 T)``."""
    return 1.0 - math.log2(1.0 + 2.0 / math.log2(T))


def loglog_slope(curve: ScalingCurve, T_min: int, T_max: int) -> float:
    mask = (curve.horizons >= T_min) & (curve.horizons <= T_max)
    if mask.sum() < 2:
        raise InsufficientPoints("need two horizons in the slope window")
    x = np.log(curve.horizons[mask].astype(float))
    y = np.log(curve.values[mask])
    return float(np.polyfit(x, y, 1)[0])


def impact_ratio(kernel: CorrelationKernel, alpha: float, shock: float, horizon=math.inf) -> ImpactResult:
    """Cumulative log-intensity response to a one-off factor shock.

    Finite horizon T: ``alpha * shock * sum_{i<T} d_i``.  Infinite horizon:
    closed form (exponential), the bound ``alpha shock (1 + 1/(gamma - 1))``
    for gamma > 1, and ``inf`` with the divergence class for gamma <= 1.
    """
    if not math.isfinite(shock):
        raise DomainError("shock must be finite")
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    fam, p = kernel.family, kernel.param
    if fam == POWER:
        if p > 1.0:
            div, growth = Divergence.FINITE, 0.0
        elif p == 1.0:
            div, growth = Divergence.LOG, 0.0
        else:
            div, growth = Divergence.POWER_LAW, 1.0 - p
    else:
        div, growth = Divergence.FINITE, 0.0

    scale = alpha * shock
    if math.isinf(horizon):
        if fam == EXPONENTIAL:
            value = scale / (1.0 - p)
        elif fam == INDEPENDENT:
            value = scale
        elif div is Divergence.FINITE:
            value = scale * (1.0 + 1.0 / (p - 1.0))
        else:
            value = math.copysign(math.inf, scale) if scale != 0 else 0.0
        return ImpactResult(value, div, growth)

    T = int(horizon)
    if T < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    value = scale * float(np.sum(kernel.values(np.arange(T))))
    return ImpactResult(value, div, growth)


def classify_phase(kernel: CorrelationKernel) -> PhaseLabel:
    if kernel.family != POWER or kernel.param > 1.0:
        return PhaseLabel.NORMAL
    if kernel.param == 1.0:
        return PhaseLabel.CRITICAL
    return PhaseLabel.SUPER_NORMAL
