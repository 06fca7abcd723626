from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from merton_poisson.errors import DomainError
from merton_poisson.latent import CorrelationKernel
from merton_poisson.merton import (IntensityParams, MertonParams, conditional_pd, intensity,
                                   intensity_moments, intensity_path_recursion, limit_map,
                                   logistic_phi, lognormal_intensity_density, merton_pmf, mixture_pmf,
                                   poisson_lognormal_logpdf, simulate_merton, simulate_poisson_lognormal,
                                   small_pd_closed_form)

# high-precision reference values (mpmath, 25 digits)
CPD_001_02_0 = 0.004648489920910662
LAMBDA0_3000_001_02 = 17.420205632355349
INTENSITY_181_14_1 = 73.39911939988861
LAMBDA_BAR_181_14 = 48.22665797892245
V_BAR_181_14 = 14185.879173926070
LOGISTIC_1_13 = 0.7858349830425586
PHI_1 = 0.8413447460685429
PMF0_1_1 = 0.3817564647554833


def test_param_validation():
    with pytest.raises(DomainError):
        MertonParams(0.0, 0.2, 100)
    with pytest.raises(DomainError):
        MertonParams(0.01, 1.0, 100)
    with pytest.raises(DomainError):
        MertonParams(0.01, 0.2, 0)
    with pytest.raises(DomainError):
        MertonParams(0.01, 0.2, 10, beta=0.0)
    with pytest.raises(DomainError):
        IntensityParams(0.0, 1.0)
    with pytest.raises(DomainError):
        IntensityParams(1.0, -0.1)
    assert math.isfinite(MertonParams(1e-12, 0.3, 5).threshold)


def test_conditional_pd_examples():
    mp = MertonParams(0.01, 0.0, 100)
    assert conditional_pd(3.7, mp) == pytest.approx(0.01, rel=1e-12)
    assert conditional_pd(40.0, MertonParams(0.01, 0.2, 100)) < 1e-100
    assert conditional_pd(0.0, MertonParams(0.01, 0.2, 100)) == pytest.approx(CPD_001_02_0, rel=1e-10)


def test_conditional_pd_integrates_to_p_prime():
    mp = MertonParams(0.004, 0.3, 100)
    val, _ = integrate.quad(lambda y: conditional_pd(y, mp) * stats.norm.pdf(y), -12, 12)
    assert val == pytest.approx(0.004, rel=1e-8)


def test_logistic_examples():
    assert logistic_phi(0.0, 1.3) == 0.5
    assert logistic_phi(1.0, 1.3) == pytest.approx(LOGISTIC_1_13, rel=1e-12)
    assert stats.norm.cdf(1.0) == pytest.approx(PHI_1, rel=1e-12)
    with pytest.raises(DomainError):
        logistic_phi(0.0, -1.0)


@given(st.floats(-50, 50), st.floats(0.1, 5))
def test_logistic_antisymmetry(x, beta):
    assert logistic_phi(-x, beta) == pytest.approx(1.0 - logistic_phi(x, beta), abs=1e-12)


def test_limit_map_examples():
    ip = limit_map(MertonParams(0.01, 0.0, 3000))
    assert ip.alpha == 0.0 and ip.lambda0 == pytest.approx(30.0)
    assert limit_map(MertonParams(0.01, 0.5, 10)).alpha == pytest.approx(1.3, rel=1e-14)
    ip = limit_map(MertonParams(0.01, 0.2, 3000))
    assert ip.alpha == pytest.approx(0.65, rel=1e-14)
    assert ip.lambda0 == pytest.approx(LAMBDA0_3000_001_02, rel=1e-12)


def test_intensity_examples():
    ip = IntensityParams(18.1, 1.4)
    assert intensity(0.0, ip) == 18.1
    assert intensity(2.3, IntensityParams(5.0, 0.0)) == 5.0
    assert intensity(1.0, ip) == pytest.approx(INTENSITY_181_14_1, rel=1e-12)


def test_intensity_moments_examples():
    assert intensity_moments(IntensityParams(7.0, 0.0)) == (7.0, 0.0)
    lb, vb = intensity_moments(IntensityParams(18.1, 1.4))
    assert lb == pytest.approx(LAMBDA_BAR_181_14, rel=1e-12)
    assert vb == pytest.approx(V_BAR_181_14, rel=1e-12)
    # independent Gauss-Hermite oracle for the first two moments
    x, w = np.polynomial.hermite_e.hermegauss(120)
    w = w / math.sqrt(2 * math.pi)
    lam = 18.1 * np.exp(1.4 * x)
    assert np.sum(w * lam) == pytest.approx(lb, rel=1e-10)
    assert np.sum(w * lam ** 2) - np.sum(w * lam) ** 2 == pytest.approx(vb, rel=1e-8)


@given(st.floats(0.1, 100), st.floats(0.0, 3.0), st.floats(0.01, 1.0))
def test_lambda_bar_increasing_in_alpha(lam0, alpha, da):
    assert intensity_moments(IntensityParams(lam0, alpha + da))[0] > intensity_moments(IntensityParams(lam0, alpha))[0]


def test_lognormal_density():
    ip = IntensityParams(18.1, 1.4)
    f = lambda lam: lognormal_intensity_density(lam, ip)
    # integrate in log space for accuracy
    norm, _ = integrate.quad(lambda u: f(math.exp(u)) * math.exp(u), -30, 30, epsabs=1e-13)
    assert abs(norm - 1.0) < 1e-8
    m1, _ = integrate.quad(lambda u: f(math.exp(u)) * math.exp(2 * u), -30, 40, epsrel=1e-12)
    assert m1 == pytest.approx(intensity_moments(ip)[0], rel=1e-6)
    grid = np.exp(np.linspace(math.log(0.01), math.log(50.0), 200_001))
    mode = grid[np.argmax(f(grid))]
    assert mode == pytest.approx(18.1 * math.exp(-1.4 ** 2), rel=1e-4)
    with pytest.raises(DomainError):
        lognormal_intensity_density(1.0, IntensityParams(1.0, 0.0))
    with pytest.raises(DomainError):
        lognormal_intensity_density(0.0, ip)


def test_mixture_pmf_alpha_zero_is_poisson():
    k = np.arange(60)
    np.testing.assert_allclose(mixture_pmf(k, IntensityParams(12.5, 0.0)), stats.poisson.pmf(k, 12.5),
                               rtol=1e-12)


def test_mixture_pmf_against_precise_quadrature():
    assert mixture_pmf(0, IntensityParams(1.0, 1.0)) == pytest.approx(PMF0_1_1, rel=1e-8)
    for k, lam0, a in [(5, 18.0, 1.4), (48, 18.1, 1.4), (0, 30.0, 2.5), (300, 5.0, 2.0)]:
        ref, _ = integrate.quad(lambda y: stats.poisson.pmf(k, lam0 * math.exp(a * y)) * stats.norm.pdf(y),
                                -12, 12, points=[(math.log(k + 0.5) - math.log(lam0)) / a], limit=400,
                                epsabs=0, epsrel=1e-11)
        assert mixture_pmf(k, IntensityParams(lam0, a)) == pytest.approx(ref, rel=1e-6)


def test_mixture_pmf_monte_carlo(rng):
    lam = np.exp(rng.standard_normal(1_000_000))
    v = np.exp(-lam)
    assert abs(mixture_pmf(0, IntensityParams(1.0, 1.0)) - v.mean()) < 3 * v.std() / 1000


@pytest.mark.parametrize("lam0,alpha,K", [(18.1, 1.4, 200_000), (100.0, 0.6, 2_000), (1.0, 2.0, 400_000)])
def test_mixture_pmf_normalization_and_mean(lam0, alpha, K):
    ip = IntensityParams(lam0, alpha)
    total = mean = 0.0
    for lo in range(0, K, 50_000):
        k = np.arange(lo, min(lo + 50_000, K))
        p = mixture_pmf(k, ip)
        total += p.sum()
        mean += (k * p).sum()
    assert abs(total - 1.0) < 1e-6
    assert mean == pytest.approx(intensity_moments(ip)[0], rel=1e-4)


def test_noninteger_counts_continuous():
    a = poisson_lognormal_logpdf(np.array([10.0, 10.5, 11.0]), 18.0, 1.4)
    assert a[0] > a[1] - 1 and np.all(np.isfinite(a))
    # alpha = 0: continuous extension of the Poisson log-density
    assert poisson_lognormal_logpdf(2.5, 3.0, 0.0) == pytest.approx(2.5 * math.log(3) - 3 - math.lgamma(3.5))


def test_predictive_with_mean_and_var():
    # N(y; m, v) mixing equals standard mixing with lambda0 e^{alpha m} and alpha sqrt(v)
    a = poisson_lognormal_logpdf(7.0, 5.0, 1.2, mean=0.4, var=0.3)
    b = poisson_lognormal_logpdf(7.0, 5.0 * math.exp(1.2 * 0.4), 1.2 * math.sqrt(0.3))
    assert a == pytest.approx(b, abs=1e-9)


def test_merton_pmf_matches_quad():
    mp = MertonParams(0.004, 0.2, 5000)
    k = 15
    ref, _ = integrate.quad(lambda y: stats.binom.pmf(k, 5000, conditional_pd(y, mp)) * stats.norm.pdf(y),
                            -10, 10, limit=400)
    assert merton_pmf(k, mp)[0] == pytest.approx(ref, rel=1e-8)


def test_simulate_merton_rho_zero(rng):
    mp = MertonParams(0.01, 0.0, 2000)
    k = simulate_merton(mp, CorrelationKernel.independent(), 20_000, rng)
    assert abs(k.mean() - 20.0) < 3 * math.sqrt(2000 * 0.01 * 0.99 / 20_000)
    assert k.dtype.kind == "i" and np.all(k >= 0)


def test_simulate_merton_single_obligor(rng):
    mp = MertonParams(0.05, 0.3, 1)
    k = simulate_merton(mp, CorrelationKernel.independent(), 200_000, rng)
    assert set(np.unique(k)) <= {0, 1}
    assert abs(k.mean() - 0.05) < 3 * math.sqrt(0.05 * 0.95 / 200_000)


def test_simulate_poisson_lognormal_alpha_zero(rng):
    k = simulate_poisson_lognormal(IntensityParams(9.0, 0.0), CorrelationKernel.exponential(0.9), 50_000, rng)
    assert abs(k.mean() - 9.0) < 3 * math.sqrt(9.0 / 50_000)
    assert abs(np.corrcoef(k[:-1], k[1:])[0, 1]) < 0.02


def test_simulate_poisson_lognormal_mean(rng):
    ip = IntensityParams(18.1, 1.0)
    k = simulate_poisson_lognormal(ip, CorrelationKernel.independent(), 100_000, rng)
    lb, vb = intensity_moments(ip)
    assert abs(k.mean() - lb) < 3 * math.sqrt((lb + vb) / 100_000)


def test_recursion_and_cholesky_samplers_agree():
    ip = IntensityParams(6.0, 0.8)
    ker = CorrelationKernel.exponential(0.5)
    rec = np.concatenate([simulate_poisson_lognormal(ip, ker, 40, np.random.default_rng(i), method="recursion")
                          for i in range(500)])
    cho = np.concatenate([simulate_poisson_lognormal(ip, ker, 40, np.random.default_rng(10_000 + i),
                                                     method="cholesky") for i in range(500)])
    edges = [0, 2, 4, 6, 8, 11, 15, 20, 30, np.inf]
    table = np.array([np.histogram(rec, edges)[0], np.histogram(cho, edges)[0]])
    assert stats.chi2_contingency(table)[1] > 0.01


def test_intensity_recursion_matches_latent_form():
    # the multiplicative recursion is exactly lambda0 exp(alpha y) with y an AR(1) path
    ip = IntensityParams(4.0, 1.1)
    lam = intensity_path_recursion(ip, 0.7, 30, np.random.default_rng(2))
    y = np.log(lam / 4.0) / 1.1
    innov = (y[1:] - 0.7 * y[:-1]) / math.sqrt(1 - 0.49)
    xi = np.random.default_rng(2).standard_normal(30)
    np.testing.assert_allclose(innov, xi[1:], atol=1e-10)


@pytest.mark.xfail(strict=True, reason="the logistic small-PD closed form is off by far more than 10% "
                                       "(+61% at y=0, p'=1e-3, rho=0.2); see ledger")
def test_small_pd_closed_form_within_10pct():
    for p in (1e-3, 1e-4):
        mp = MertonParams(p, 0.2, 1000)
        for y in np.linspace(-2, 2, 9):
            # the closed form is written in the flipped variable: G(y) at y, closed form at -y
            exact = conditional_pd(y, mp)
            approx = small_pd_closed_form(-y, mp)
            assert abs(approx / exact - 1) < 0.10


@pytest.mark.xfail(strict=True, reason="along the fixed-lambda0 ladder the exact Merton mean N p' grows, "
                                       "so the TV distance to the limit mixture increases; see ledger")
def test_tv_distance_decreases_along_ladder():
    rho, lam0 = 0.2, 10.0
    k = np.arange(400)
    tv = []
    for N in (2000, 8000, 32000):
        mp = MertonParams((lam0 / N) ** math.sqrt(1 - rho), rho, N)
        tv.append(0.5 * np.abs(merton_pmf(k, mp) - mixture_pmf(k, limit_map(mp))).sum())
    assert tv[0] > tv[1] > tv[2]
