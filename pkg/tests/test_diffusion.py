"""Aggregate-variance scaling, impact and phase classification."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from merton_poisson.diffusion import (Divergence, PhaseLabel, ScalingCurve, aggregate_variance,
                                      aggregate_variance_exact, classify_phase, delta_at, impact_ratio,
                                      log_correction_delta, loglog_slope, scaling_curve, scaling_exponent)
from merton_poisson.errors import DomainError, InsufficientPoints
from merton_poisson.latent import CorrelationKernel, build_correlation_matrix, sample_path_general
from merton_poisson.merton import IntensityParams, intensity, intensity_moments

EXP = CorrelationKernel.exponential
POW = CorrelationKernel.power
IND = CorrelationKernel.independent


def brute_force_variance(kernel, T, V_bar):
    """Independent oracle: sum of every entry of V_bar * [d_|s-t|]."""
    s, t = np.meshgrid(np.arange(T), np.arange(T))
    lags = np.abs(s - t)
    d = np.where(lags == 0, 1.0, kernel.values(np.maximum(lags, 1)))
    return float(V_bar * d.sum())


# ---------------------------------------------------------------- aggregate_variance

def test_independent_is_T_Vbar():
    assert aggregate_variance(IND(), 17, 2.5) == pytest.approx(17 * 2.5, rel=1e-15)


def test_exponential_half_T3():
    assert aggregate_variance(EXP(0.5), 3, 1.0) == pytest.approx(5.5, rel=1e-14)


def test_power_one_T3():
    assert aggregate_variance(POW(1.0), 3, 1.0) == pytest.approx(3 + 2 * (2 / 2 + 1 / 3), rel=1e-14)


@pytest.mark.parametrize("kernel", [EXP(0.3), EXP(0.9), EXP(0.999), POW(0.25), POW(1.0), POW(2.0), IND()])
@pytest.mark.parametrize("T", [1, 2, 7, 64, 256])
def test_matches_double_sum(kernel, T):
    assert aggregate_variance(kernel, T, 1.7) == pytest.approx(brute_force_variance(kernel, T, 1.7), rel=1e-10)


def test_aggregate_variance_rejects_bad_T():
    with pytest.raises(DomainError):
        aggregate_variance(EXP(0.5), 0, 1.0)


# ---------------------------------------------------------------- exact log-normal variance

def test_exact_independent_equals_T_Vbar():
    ip = IntensityParams(18.0, 1.4)
    _, V_bar = intensity_moments(ip)
    assert aggregate_variance_exact(IND(), 30, ip) == pytest.approx(30 * V_bar, rel=1e-12)


@pytest.mark.parametrize("kernel", [EXP(0.9), POW(0.5)])
def test_exact_small_alpha_agrees_with_linearization(kernel):
    ip = IntensityParams(5.0, 1e-4)
    _, V_bar = intensity_moments(ip)
    ratio = aggregate_variance_exact(kernel, 50, ip) / aggregate_variance(kernel, 50, V_bar)
    assert ratio == pytest.approx(1.0, abs=1e-6)


def test_exact_matches_monte_carlo():
    kernel, T, ip = EXP(0.9), 64, IntensityParams(1.0, 1.0)
    rng = np.random.default_rng(2024)
    y = sample_path_general(kernel, T, rng, size=100_000)
    totals = intensity(y, ip).sum(axis=1)
    mc_var = totals.var(ddof=1)
    # SE of a sample variance uses the fourth central moment
    c = totals - totals.mean()
    se = math.sqrt((np.mean(c ** 4) - mc_var ** 2) / totals.size)
    exact = aggregate_variance_exact(kernel, T, ip)
    assert abs(mc_var - exact) < 3 * se


# ---------------------------------------------------------------- scaling curve / delta

def test_independent_curve_is_one_over_T():
    c = scaling_curve(IND(), 1024)
    np.testing.assert_allclose(c.values, 1.0 / c.horizons, rtol=1e-14)
    assert c.horizons[0] == 1 and c.horizons[-1] == 1024


def test_curve_independent_of_vbar():
    a, b = scaling_curve(POW(0.5), 256, 1.0), scaling_curve(POW(0.5), 256, 7.0)
    np.testing.assert_array_equal(a.values, b.values)


def test_curve_requires_two_points():
    with pytest.raises(DomainError):
        scaling_curve(EXP(0.5), 1)


def test_scaling_curve_invariants():
    with pytest.raises(DomainError):
        ScalingCurve(np.array([2, 1]), np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        ScalingCurve(np.array([1, 2]), np.array([1.0, 0.0]))


def test_exponential_slope_is_minus_one():
    c = scaling_curve(EXP(0.9), 2 ** 14)
    assert loglog_slope(c, 2 ** 10, 2 ** 14) == pytest.approx(-1.0, abs=0.05)


@pytest.mark.parametrize("gamma", [0.25, 0.5, 0.75])
def test_power_below_one_slope_is_minus_gamma(gamma):
    c = scaling_curve(POW(gamma), 2 ** 14)
    assert loglog_slope(c, 2 ** 10, 2 ** 14) == pytest.approx(-gamma, abs=0.05)


@pytest.mark.parametrize("gamma", [1.5, 2.0])
def test_power_above_one_slope_is_minus_one(gamma):
    c = scaling_curve(POW(gamma), 2 ** 14)
    assert loglog_slope(c, 2 ** 10, 2 ** 14) == pytest.approx(-1.0, abs=0.05)


def test_delta_of_one_over_T_is_one():
    T = 2 ** np.arange(6)
    deltas = scaling_exponent(ScalingCurve(T, 3.0 / T))
    assert [d for _, d in deltas] == pytest.approx([1.0] * 5, abs=1e-14)


def test_delta_limits():
    assert delta_at(POW(0.5), 2 ** 13) == pytest.approx(0.5, abs=0.02)
    assert delta_at(POW(2.0), 2 ** 13) == pytest.approx(1.0, abs=0.02)


def test_delta_at_matches_curve():
    c = scaling_curve(POW(0.75), 512)
    for T, d in scaling_exponent(c):
        assert delta_at(POW(0.75), T) == pytest.approx(d, rel=1e-12)


def test_scaling_exponent_errors():
    with pytest.raises(InsufficientPoints):
        scaling_exponent(ScalingCurve(np.array([4]), np.array([1.0])))
    with pytest.raises(InsufficientPoints):
        scaling_exponent(ScalingCurve(np.array([1, 3]), np.array([1.0, 0.5])))


def test_critical_delta_below_one_everywhere():
    c = scaling_curve(POW(1.0), 2 ** 16)
    assert all(d < 1.0 for _, d in scaling_exponent(c))


def test_log_correction_below_one():
    for T in (4, 64, 2 ** 13, 2 ** 30):
        assert log_correction_delta(T) < 1.0
    # oracle: 1 - log2(1 + 2/13)
    assert log_correction_delta(2 ** 13) == pytest.approx(1 - math.log2(15 / 13), rel=1e-15)


# ---------------------------------------------------------------- impact

def test_impact_exponential_closed_form():
    r = impact_ratio(EXP(0.5), 1.0, 1.0, math.inf)
    assert r.value == pytest.approx(2.0) and r.divergence is Divergence.FINITE


def test_impact_power_classes():
    assert impact_ratio(POW(1.0), 1.0, 1.0).divergence is Divergence.LOG
    r = impact_ratio(POW(0.5), 1.0, 1.0)
    assert r.divergence is Divergence.POWER_LAW and r.growth_exponent == pytest.approx(0.5)
    assert math.isinf(r.value)
    r = impact_ratio(POW(2.0), 1.4, 1.0)
    assert r.divergence is Divergence.FINITE and r.value == pytest.approx(1.4 * 2.0)


def test_impact_finite_horizon_converges_to_closed_form():
    r = impact_ratio(EXP(0.8), 1.3, 0.7, 2000)
    assert r.value == pytest.approx(1.3 * 0.7 / 0.2, rel=1e-12)


def test_impact_power_bound_dominates_partial_sums():
    bound = impact_ratio(POW(1.5), 1.0, 1.0).value
    assert impact_ratio(POW(1.5), 1.0, 1.0, 10 ** 5).value <= bound


def test_impact_log_growth():
    a, b = impact_ratio(POW(1.0), 1.0, 1.0, 10 ** 3).value, impact_ratio(POW(1.0), 1.0, 1.0, 10 ** 6).value
    # harmonic numbers: H_n - H_m ~ log(n/m)
    assert b - a == pytest.approx(math.log(1000), rel=1e-3)


@given(st.sampled_from([EXP(0.3), EXP(0.99), POW(0.5), POW(1.0), POW(2.5), IND()]),
       st.floats(0.0, 3.0), st.floats(0.01, 5.0), st.integers(1, 500))
def test_impact_monotone_in_horizon(kernel, alpha, shock, T):
    assert impact_ratio(kernel, alpha, shock, T + 1).value >= impact_ratio(kernel, alpha, shock, T).value


def test_impact_rejects_nonfinite_shock():
    with pytest.raises(DomainError):
        impact_ratio(EXP(0.5), 1.0, math.nan)


# ---------------------------------------------------------------- phases

@pytest.mark.parametrize("kernel,label", [
    (EXP(0.999), PhaseLabel.NORMAL), (IND(), PhaseLabel.NORMAL), (POW(2.0), PhaseLabel.NORMAL),
    (POW(1.0), PhaseLabel.CRITICAL), (POW(0.5), PhaseLabel.SUPER_NORMAL)])
def test_classify_phase(kernel, label):
    assert classify_phase(kernel) is label


def test_critical_variance_grows_like_T_log_T():
    # V(T) / (T log T) tends to a constant (2 V_bar); compare two large horizons
    r = [aggregate_variance(POW(1.0), T, 1.0) / (T * math.log(T)) for T in (2 ** 16, 2 ** 20)]
    assert r[1] == pytest.approx(2.0, rel=0.15)
    assert abs(r[1] - 2.0) < abs(r[0] - 2.0)


def test_correlation_matrix_consistency():
    # the closed form is the sum of the correlation matrix used by the sampler
    K = build_correlation_matrix(POW(0.6), 40)
    assert aggregate_variance(POW(0.6), 40, 1.0) == pytest.approx(K.sum(), rel=1e-12)
