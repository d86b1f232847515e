# test_linear.py

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from errors import DomainError
from linear import (SigmaCoeffs, WeightedSeq, apply_L, decay_traces, delta1_for_theta, discrete_derivative,
                    distance_to_limit, evolve_T, evolve_trace, fit_decay, fundamental_psi, hatq_supersolution,
                    operator_matrix, poincare_constant, poincare_rayleigh, psi_difference_constant, psi_limit,
                    sample_poincare_sup, semigroup_gap, weighted_norm)
from stationary import IndexWindow, ShiftSequence, m_bar

WINDOW = IndexWindow(n_lo=-8, n_hi=6)
BETA = 1.5


@pytest.fixture(scope="module")
def coeffs(model):
    return SigmaCoeffs(model, WINDOW, 1.0)


def test_weighted_norm():
    values = np.zeros(WINDOW.size)
    values[WINDOW.position(-2)] = 3.0
    values[WINDOW.position(2)] = 1.0
    assert weighted_norm(WINDOW, values, 1.0) == pytest.approx(0.75 + 4.0)
    assert weighted_norm(WINDOW, values, 0.0) == pytest.approx(0.75 + 1.0)


def test_discrete_derivatives():
    y = WeightedSeq(WINDOW, WINDOW.indices.astype(float) ** 2)
    plus = discrete_derivative(y, "plus").values
    minus = discrete_derivative(y, "minus").values
    assert plus[-1] == 0.0 and minus[0] == 0.0
    np.testing.assert_array_equal(plus[:-1], minus[1:])
    assert distance_to_limit(y).values[-1] == 0.0
    with pytest.raises(DomainError):
        discrete_derivative(y, "sideways")


def test_sigma_limits(model, coeffs):
    sigma = coeffs.sigma()
    assert coeffs.sigma_limit_defect() < 0.1
    assert np.all(sigma[WINDOW.indices >= WINDOW.n_hi] == 0.0)
    assert np.all(sigma[:-1] > 0.0)
    half = SigmaCoeffs(model, WINDOW, 1.0, factor=4.0)
    np.testing.assert_allclose(half.sigma(), 0.5 * sigma, rtol=1e-14)


def test_sigma_matches_zeta_form(model, coeffs):
    profile = m_bar(model, 1.0, ShiftSequence.constant(WINDOW, 0.0))
    ns = WINDOW.indices
    g = 1.0 + np.exp2(BETA * ns)
    g_up = 1.0 + np.exp2(BETA * (ns + 1.0))
    expected = 4.0 * profile.zeta * profile.m_bar * g_up / g
    np.testing.assert_allclose(coeffs.sigma()[:-1], expected[:-1], rtol=1e-12)


def test_constants_are_fixed_points(model, coeffs):
    y = WeightedSeq(WINDOW, np.full(WINDOW.size, 0.3))
    assert np.max(np.abs(apply_L(model, coeffs, y).values)) < 1e-12
    rows = evolve_trace(model, coeffs, y, [0.0, 1.0, 3.0])
    np.testing.assert_allclose(rows[-1], 0.3, rtol=1e-10)


def test_operator_rows_sum_to_zero(coeffs):
    A = operator_matrix(coeffs).toarray()
    np.testing.assert_allclose(A.sum(axis=1), 0.0, atol=1e-9 * np.abs(A).max())


def test_evolution_relaxes_derivative(model, coeffs):
    y0 = np.zeros(WINDOW.size)
    y0[WINDOW.position(0)] = 1.0
    y0 = WeightedSeq(WINDOW, y0)
    times = np.linspace(0.0, 6.0, 25)
    d_plus, gap = decay_traces(model, coeffs, y0, times, 0.0)
    assert d_plus[-1] < 0.2 * d_plus[0]
    assert gap[-1] < 0.2 * gap[0]
    rows = evolve_trace(model, coeffs, y0, times)
    assert np.max(np.abs(rows)) <= 1.0 + 1e-9


def test_time_dependent_matches_constant(model, coeffs):
    path = SigmaCoeffs(model, WINDOW, 1.0, kind="time_dependent",
                       shift_path=lambda t: ShiftSequence.constant(WINDOW, 0.0))
    y0 = WeightedSeq(WINDOW, np.sin(WINDOW.indices.astype(float)) * np.exp2(-WINDOW.indices.astype(float)))
    a = evolve_T(model, coeffs, y0, 0.0, 1.0)
    b = evolve_T(model, path, y0, 0.0, 1.0)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-6, atol=1e-5)


def test_time_dependent_needs_path(model):
    with pytest.raises(DomainError):
        SigmaCoeffs(model, WINDOW, 1.0, kind="time_dependent")


def test_truncated_data_must_vanish(model):
    truncated = SigmaCoeffs(model, WINDOW, 1.0, N=3)
    with pytest.raises(DomainError):
        evolve_trace(model, truncated, WeightedSeq(WINDOW, np.ones(WINDOW.size)), [0.0, 1.0])


def test_semigroup_gap_of_identical_operators(model, coeffs):
    y0 = WeightedSeq(WINDOW, np.linspace(-1.0, 1.0, WINDOW.size))
    gap = semigroup_gap(model, coeffs, coeffs, y0, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(gap, 0.0, atol=1e-14)


@pytest.mark.parametrize("ell", [0, 2])
def test_psi_closed_forms(ell):
    lam = 2.0 ** (BETA * ell) / 4.0
    lam1 = 2.0 ** (BETA * (ell + 1)) / 4.0
    t = np.array([0.0, 0.3, 1.0, 2.5])
    np.testing.assert_allclose(fundamental_psi(BETA, ell, ell, t), np.exp(-lam * t), rtol=1e-12)
    expected = lam1 / (lam1 - lam) * (np.exp(-lam * t) - np.exp(-lam1 * t))
    np.testing.assert_allclose(fundamental_psi(BETA, ell, ell + 1, t), expected, rtol=1e-10, atol=1e-15)
    assert fundamental_psi(BETA, ell, ell - 1, 1.0) == 0.0


@pytest.mark.parametrize("gap", [0, 1, 3])
def test_psi_normalization(gap):
    ell = 1
    lam = 2.0 ** (BETA * ell) / 4.0
    integral, _ = quad(lambda s: fundamental_psi(BETA, ell, ell + gap, s), 0.0, np.inf, limit=200)
    assert lam * integral == pytest.approx(1.0, rel=1e-6)


def test_psi_limit_and_differences():
    assert psi_limit(BETA, 0, 1.0) == pytest.approx(fundamental_psi(BETA, 0, 25, 1.0), rel=1e-6)
    with pytest.raises(DomainError):
        psi_limit(BETA, 0, 0.0)
    with pytest.raises(DomainError):
        fundamental_psi(BETA, 0, 1, -1.0)
    assert math.isfinite(psi_difference_constant(BETA, 0, 4, np.linspace(0.0, 3.0, 13)))


def test_fit_exponential():
    t = np.linspace(0.0, 6.0, 121)
    fit = fit_decay(t, 3.0 * np.exp(-0.7 * t))
    assert fit.C == pytest.approx(3.0, rel=1e-8)
    assert fit.a == pytest.approx(0.0, abs=1e-8)
    assert fit.nu == pytest.approx(0.7, rel=1e-8)
    assert fit.residual < 1e-10


def test_fit_power_and_exponential():
    t = np.linspace(0.0, 6.0, 121)
    fit = fit_decay(t[1:], t[1:] ** -0.5 * np.exp(-t[1:]))
    assert fit.a == pytest.approx(0.5, rel=1e-8)
    assert fit.nu == pytest.approx(1.0, rel=1e-8)
    np.testing.assert_allclose(fit.envelope([1.0, 2.0]), [np.exp(-1.0), 2.0 ** -0.5 * np.exp(-2.0)], rtol=1e-8)


def test_fit_rejects_bad_traces():
    t = np.linspace(0.0, 6.0, 121)
    with pytest.raises(DomainError):
        fit_decay(t[:10], np.ones(10))
    with pytest.raises(DomainError):
        fit_decay(t, np.zeros(t.size))


def test_poincare_constant_bounds_samples(model, profile, rng):
    c0 = poincare_constant(model, profile)
    assert 0.0 < c0 < math.inf
    assert sample_poincare_sup(model, profile, rng, samples=200) <= c0 * (1.0 + 1e-8)


def test_poincare_ratio_of_zero_sequence(model, profile):
    y = WeightedSeq(profile.window, np.zeros(profile.window.size))
    assert poincare_rayleigh(model, profile, y) == 0.0


@settings(max_examples=30, deadline=None)
@given(theta2=st.floats(-0.9, 0.9))
def test_delta1_inverts_theta(theta2):
    delta1 = delta1_for_theta(theta2)
    assert 1.0 + math.log2((1.0 - delta1) / (1.0 + delta1)) == pytest.approx(theta2, abs=1e-12)


def test_hatq_sandwich(model):
    times = np.linspace(0.1, 10.0, 34)
    report = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, times)
    assert report.passed
    assert report.values.shape == (34, 11)
    assert report.c1 > 0.0 and math.isfinite(report.c2)
    assert report.c1_ext >= 0.5 * report.c1
    assert report.c2_ext <= 2.0 * report.c2
    at_zero = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, [0.0, 1.0])
    np.testing.assert_allclose(at_zero.values[0], 4.0 * 0.05 ** 1.5)
    np.testing.assert_allclose(report.values[:, 0], 4.0 * 0.05 ** 1.5 * np.exp(-0.5 * report.times), rtol=1e-10)


def test_hatq_extension_leaves_lower_levels(model):
    times = np.linspace(0.1, 10.0, 12)
    short = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, times, extend=1)
    long = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, times, extend=6)
    np.testing.assert_allclose(short.values, long.values, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("offset", [-0.5, 0.5])
def test_hatq_sandwich_rejects_wrong_weight(model, offset):
    times = np.linspace(0.1, 10.0, 34)
    matched = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, times)
    report = hatq_supersolution(model, 0, 0.05, 0.1, 0.5, times, theta2=matched.theta2 + offset)
    assert not report.passed


@pytest.mark.slow
def test_decay_fit_recovers_smoothing_power(model):
    window = IndexWindow(n_lo=-8, n_hi=12)
    coeffs = SigmaCoeffs(model, window, 1.0)
    ns = window.indices
    y0 = WeightedSeq(window, np.where(ns % 2 == 0, 1.0, -1.0), 0.0)
    times = np.geomspace(1e-3, 8.0, 60)
    d_plus, _ = decay_traces(model, coeffs, y0, np.concatenate([[0.0], times]), 0.75)
    fit = fit_decay(times, d_plus[1:], t_burn=1e-3, fit_power=True)
    assert fit.nu > 0.0
    assert fit.a == pytest.approx(0.75 / BETA, rel=0.2)


def test_truncated_evolution_keeps_upper_rows_zero(model):
    truncated = SigmaCoeffs(model, WINDOW, 1.0, N=3)
    y0 = np.sin(WINDOW.indices.astype(float)) * np.exp2(-WINDOW.indices.astype(float))
    y0[WINDOW.indices > 3] = 0.0
    rows = evolve_trace(model, truncated, WeightedSeq(WINDOW, y0), np.linspace(0.0, 2.0, 9))
    np.testing.assert_array_equal(rows[:, WINDOW.indices > 3], 0.0)
    assert np.any(rows[-1, WINDOW.indices <= 3] != y0[WINDOW.indices <= 3])


def test_poincare_constant_stable_under_window_growth(model):
    constants = []
    for n_lo, n_hi in [(-16, 10), (-20, 12), (-24, 14)]:
        window = IndexWindow(n_lo=n_lo, n_hi=n_hi)
        constants.append(poincare_constant(model, m_bar(model, 1.0, ShiftSequence.constant(window, 0.0))))
    assert constants[1] == pytest.approx(constants[0], rel=0.1)
    assert constants[2] == pytest.approx(constants[1], rel=0.1)
