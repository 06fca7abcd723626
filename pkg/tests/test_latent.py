from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from merton_poisson.errors import DomainError, NotPositiveDefinite
from merton_poisson.latent import (CorrelationKernel, build_correlation_matrix, cholesky_factor,
                                   conditional_forecast, kernel_cholesky, kernel_value, sample_path,
                                   sample_path_ar1, sample_path_general)

kernels = st.one_of(
    st.floats(0.0, 0.999).map(CorrelationKernel.exponential),
    st.floats(0.0, 3.0).map(CorrelationKernel.power),
    st.just(CorrelationKernel.independent()),
)


def test_kernel_value_examples():
    assert kernel_value(CorrelationKernel.exponential(0.89), 1) == pytest.approx(0.89)
    assert kernel_value(CorrelationKernel.power(0.64), 0) == 1.0
    assert kernel_value(CorrelationKernel.power(1.0), 1) == pytest.approx(0.5)
    assert kernel_value(CorrelationKernel.independent(), 3) == 0.0


def test_power_kernel_decays():
    # decay (i+1)^-gamma, not growth
    assert kernel_value(CorrelationKernel.power(0.5), 3) == pytest.approx(0.5)


@pytest.mark.parametrize("bad", [
    lambda: CorrelationKernel.exponential(1.0),
    lambda: CorrelationKernel.exponential(-0.1),
    lambda: CorrelationKernel.power(-0.5),
    lambda: CorrelationKernel("matern", 1.0),
])
def test_kernel_validation(bad):
    with pytest.raises(DomainError):
        bad()


def test_kernel_negative_lag():
    with pytest.raises(DomainError):
        kernel_value(CorrelationKernel.power(1.0), -1)


@given(kernels, st.integers(0, 200))
def test_kernel_unit_at_zero_and_nonincreasing(kernel, lag):
    assert kernel_value(kernel, 0) == 1.0
    assert kernel_value(kernel, lag + 1) <= kernel_value(kernel, lag)
    assert 0.0 <= kernel_value(kernel, lag) <= 1.0


def test_matrix_examples():
    th = 0.3
    np.testing.assert_allclose(build_correlation_matrix(CorrelationKernel.exponential(th), 2),
                               [[1, th], [th, 1]])
    np.testing.assert_array_equal(build_correlation_matrix(CorrelationKernel.independent(), 3), np.eye(3))
    # entrywise brute force for the power kernel
    S = build_correlation_matrix(CorrelationKernel.power(0.5), 3)
    brute = np.array([[(abs(i - j) + 1) ** -0.5 for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(S, brute, rtol=1e-15)


@given(kernels, st.integers(1, 512))
def test_matrix_symmetric_unit_diag_and_cholesky(kernel, T):
    S = build_correlation_matrix(kernel, T)
    assert np.array_equal(S, S.T)
    assert np.all(np.diag(S) == 1.0)
    L = kernel_cholesky(kernel, T)
    assert np.max(np.abs(L @ L.T - S)) < 1e-8


def test_cholesky_fails_hard_on_indefinite_matrix():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        cholesky_factor(bad)


def test_ar1_edge_cases(rng):
    y = sample_path_ar1(1.0, 50, rng)
    assert np.all(y == y[0])
    y0 = sample_path_ar1(0.0, 100_000, rng)
    assert abs(np.corrcoef(y0[:-1], y0[1:])[0, 1]) < 0.01


def test_ar1_lag1_correlation(rng):
    y = sample_path_ar1(0.89, 100_000, rng)
    r1 = np.corrcoef(y[:-1], y[1:])[0, 1]
    assert abs(r1 - 0.89) < 0.01


def test_general_sampler_matches_kernel_autocovariance(rng):
    ker = CorrelationKernel.exponential(0.6)
    Y = sample_path_general(ker, 8, rng, size=20_000)
    for h in (1, 2, 4):
        cov = np.mean(Y[:, 0] * Y[:, h])
        # sd of a product of unit normals with correlation r is sqrt(1 + r^2)
        assert abs(cov - 0.6 ** h) < 4 * math.sqrt(1 + 0.6 ** (2 * h)) / math.sqrt(20_000)


def test_general_sampler_unit_marginal_variance(rng):
    Y = sample_path_general(CorrelationKernel.power(0.64), 100, rng, size=10_000)
    v = Y.var(axis=0)
    # the per-t sampling sd of a variance over 1e4 draws is ~0.014, so with 100
    # time points the +-0.03 band is held by the pooled value; each t gets ~4 sd
    assert 0.97 < v.mean() < 1.03
    assert np.all((v > 0.94) & (v < 1.06))


def test_power_sampler_acf(rng):
    Y = sample_path_general(CorrelationKernel.power(0.64), 100, rng, size=10_000)
    for h in (1, 5, 20):
        emp = np.mean(Y[:, 50] * Y[:, 50 + h])
        assert emp == pytest.approx((h + 1) ** -0.64, abs=0.05)


def test_independent_general_is_iid_normal(rng):
    y = sample_path(CorrelationKernel.independent(), 50_000, rng)
    assert abs(y.mean()) < 0.03 and abs(y.var() - 1) < 0.03
    assert abs(np.corrcoef(y[:-1], y[1:])[0, 1]) < 0.02


def test_forecast_ar1_closed_form():
    th = 0.7
    y = np.array([0.3, -1.2, 0.8, 2.0])
    m, v = conditional_forecast(CorrelationKernel.exponential(th), y, 1)
    assert abs(m - th * y[-1]) < 1e-10
    assert abs(v - (1 - th * th)) < 1e-10
    m3, v3 = conditional_forecast(CorrelationKernel.exponential(th), y, 3)
    assert m3 == pytest.approx(th ** 3 * y[-1], abs=1e-10)
    assert v3 == pytest.approx(1 - th ** 6, abs=1e-10)


def test_forecast_independent():
    assert conditional_forecast(CorrelationKernel.independent(), np.array([5.0, -3.0]), 1) == (0.0, 1.0)


def test_forecast_power_dense_oracle():
    ker = CorrelationKernel.power(0.5)
    y = np.array([0.1, -0.4, 1.3, 0.2, 0.9])
    S = build_correlation_matrix(ker, 6)
    S11, s12 = S[:5, :5], S[:5, 5]
    mean = s12 @ np.linalg.solve(S11, y)
    var = 1.0 - s12 @ np.linalg.solve(S11, s12)
    m, v = conditional_forecast(ker, y, 1)
    assert m == pytest.approx(mean, abs=1e-12) and v == pytest.approx(var, abs=1e-12)


@given(st.floats(0.0, 0.99), st.lists(st.floats(-3, 3), min_size=1, max_size=30))
def test_forecast_ar1_property(theta, ys):
    m, v = conditional_forecast(CorrelationKernel.exponential(theta), np.array(ys), 1)
    assert abs(m - theta * ys[-1]) < 1e-10
    assert abs(v - (1 - theta ** 2)) < 1e-10


def test_forecast_errors():
    with pytest.raises(DomainError):
        conditional_forecast(CorrelationKernel.power(1.0), np.array([]), 1)
    with pytest.raises(DomainError):
        conditional_forecast(CorrelationKernel.power(1.0), np.array([1.0]), 0)


def test_sampler_determinism():
    a = sample_path(CorrelationKernel.power(0.5), 30, np.random.default_rng(3))
    b = sample_path(CorrelationKernel.power(0.5), 30, np.random.default_rng(3))
    assert np.array_equal(a, b)
