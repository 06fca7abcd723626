"""Mixed-group intensity and its strong-correlation (Kesten) limit.

Group 1 obligors load on the macro factor, group 2 default at a rate driven by
an independent uniform variable.  Letting rho_A -> 1 and theta -> 1 with
``b = sqrt(1 - theta^2) / sqrt(1 - rho_A)`` fixed turns the intensity
recursion into ``lam_{t+1} = a exp(beta b xi) lam_t + (1 - a) eta_t``, whose
stationary law has a power tail with exponent kappa solving
``E[(a exp(beta b xi))^kappa] = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientSamples
from .merton import DEFAULT_BETA

DEFAULT_BURN_IN = 10_000


@dataclass(frozen=True)
class MixedParams:
    a: float
    lambda0: float
    lambda1: float
    alpha: float
    theta: float = 0.0
    beta: float = DEFAULT_BETA
    b: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.a <= 1.0:
            raise DomainError(f"a must lie in [0, 1], got {self.a}")
        if self.lambda0 <= 0 or self.lambda1 <= 0:
            raise DomainError("lambda0 and lambda1 must be positive")
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")
        if not 0.0 <= self.theta < 1.0:
            raise DomainError("theta must lie in [0, 1)")
        if self.beta <= 0 or self.b <= 0:
            raise DomainError("beta and b must be positive")

    @property
    def beta_b(self) -> float:
        return self.beta * self.b

    @property
    def beta_b_below_one(self) -> bool:
        """The ``beta b < 1`` flag quoted alongside the power-law claim.

        Informational only; stationarity needs ``a < 1`` (``E log A = ln a < 0``).
        """
        return self.beta_b < 1.0


def mixed_intensity(y, z, mp: MixedParams):
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any((z < 0) | (z > 1)):
        raise DomainError("z must lie in [0, 1]")
    out = mp.a * mp.lambda0 * np.exp(mp.alpha * y) + (1.0 - mp.a) * mp.lambda1 * z
    return float(out) if np.ndim(out) == 0 else out


def mixed_intensity_mean(mp: MixedParams) -> float:
    return mp.a * mp.lambda0 * math.exp(mp.alpha ** 2 / 2.0) + (1.0 - mp.a) * mp.lambda1 / 2.0


def simulate_kesten(a: float, beta_b: float, T: int, rng: np.random.Generator,
                    burn_in: int = DEFAULT_BURN_IN, scale: float = 1.0,
                    eta: float | None = None) -> np.ndarray:
    """Post-burn-in samples of ``lam_{t+1} = a e^{beta_b xi} lam_t + (1 - a) scale eta_t``.

    ``eta`` fixes the additive term to a constant instead of Uniform(0, 1).
    """
    if not 0.0 < a < 1.0:
        raise DomainError(f"stationarity needs 0 < a < 1, got {a}")
    if beta_b < 0:
        raise DomainError("beta_b must be non-negative")
    if T < 1 or burn_in < 0:
        raise DomainError("T must be >= 1 and burn_in >= 0")
    n = T + burn_in
    mult = a * np.exp(beta_b * rng.standard_normal(n))
    add = (1.0 - a) * scale * (rng.uniform(size=n) if eta is None else np.full(n, float(eta)))
    out = np.empty(n)
    lam = (1.0 - a) * scale * 0.5 if eta is None else float(eta)
    # plain loop over Python floats: the recursion is inherently sequential
    for t, (m, c) in enumerate(zip(mult.tolist(), add.tolist())):
        lam = m * lam + c
        out[t] = lam
    return out[burn_in:]


def kesten_theoretical_exponent(a: float, beta_b: float) -> float:
    """kappa = -2 ln(a) / (beta b)^2, the positive root of a^k exp(k^2 (beta b)^2 / 2) = 1."""
    if not 0.0 < a < 1.0:
        raise DomainError(f"a must lie in (0, 1), got {a}")
    if not beta_b > 0:
        raise DomainError("beta_b must be positive")
    return -2.0 * math.log(a) / beta_b ** 2


def kesten_moment(a: float, beta_b: float, kappa: float, nodes: int = 80) -> float:
    """``E[(a exp(beta_b xi))^kappa]`` by Gauss-Hermite quadrature (independent of the closed form)."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * (a * np.exp(beta_b * x)) ** kappa) / math.sqrt(2.0 * math.pi))


def hill_tail_exponent(samples, k_top: int) -> tuple[float, float]:
    """Hill estimate of the tail exponent from the ``k_top`` largest samples."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if k_top < 1 or k_top >= n / 10:
        raise InsufficientSamples(f"k_top={k_top} needs at least {10 * k_top + 1} samples, got {n}")
    if np.any(x <= 0):
        raise DomainError("samples must be positive")
    # k_top + 1 largest order statistics; the smallest of them is the threshold
    top = np.sort(np.partition(x, n - k_top - 1)[n - k_top - 1:])
    h = float(np.mean(np.log(top[1:]) - math.log(top[0])))
    kappa = 1.0 / h
    return kappa, kappa / math.sqrt(k_top)


def hill_plot(samples, k_values) -> list[tuple[int, float, float]]:
    return [(int(k), *hill_tail_exponent(samples, int(k))) for k in k_values]
