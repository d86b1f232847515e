# test_stationary.py

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import ConfigError, RangeError, WindowTooSmall
from kernels import LN2, KernelModel
from stationary import (IndexWindow, ShiftSequence, asymptote_report, d_mbar_dA, d_mbar_dpk, derivative_check,
                        log_derivative_pk, m_bar, mass_of, mu_bar, mu_bar_series_mp, mu_recurrence_residual,
                        profile_frame, recurrence_residual, series_tail, solve_A_for_mass, theta, total_mass,
                        zeta)


def test_zeta_at_zero(model, window):
    p = ShiftSequence.constant(window, 0.0)
    assert zeta(model, 0, p) == pytest.approx(0.362105, rel=1e-5)
    assert zeta(model, 0, p) == pytest.approx(LN2 * 2.0 / (1.0 + 2.0 ** 1.5), rel=1e-14)


def test_window_validation():
    with pytest.raises(ValueError):
        IndexWindow(n_lo=1, n_hi=12)
    with pytest.raises(ValueError):
        IndexWindow(n_lo=-2, n_hi=3)
    assert IndexWindow().size == 33


def test_shift_extensions(window):
    p = ShiftSequence.from_values(window, np.linspace(-0.01, 0.02, window.size), p_inf=0.0, p_lo_ext=0.005)
    assert p.at(window.n_hi + 5) == 0.0
    assert p.at(window.n_lo - 5) == 0.005
    assert not p.is_constant
    with pytest.raises(ConfigError):
        _ = p.rho
    with pytest.raises(ConfigError):
        ShiftSequence.constant(window, 0.2).check(0.05, KernelModel().epsilon0)


@pytest.mark.parametrize("A", [1.0, 3.0])
@pytest.mark.parametrize("rho", [0.0, 0.3])
def test_recurrence_holds(model, window, A, rho):
    profile = m_bar(model, A, ShiftSequence.constant(window, rho))
    assert np.max(recurrence_residual(profile)) < 1e-10
    assert np.max(mu_recurrence_residual(profile)) < 1e-10


def test_recurrence_with_varying_shift(model, window, rng):
    p = ShiftSequence.from_values(window, 0.04 * rng.uniform(-1.0, 1.0, window.size), p_inf=0.0)
    profile = m_bar(model, 1.0, p)
    assert np.max(recurrence_residual(profile)) < 1e-10


def test_flat_kernels_have_unit_theta(flat_model, window):
    p = ShiftSequence.constant(window, 0.0)
    ns = np.arange(-5, 6)
    np.testing.assert_allclose(theta(flat_model, ns, p), 1.0, rtol=1e-14)
    np.testing.assert_allclose(zeta(flat_model, ns, p), LN2 * np.exp2(-ns.astype(float)), rtol=1e-14)
    assert series_tail(flat_model, p, 0) == pytest.approx(0.0, abs=1e-15)
    assert mu_bar(flat_model, 2.0, p, 3) == pytest.approx(math.exp(-2.0 * 8.0), rel=1e-12)


def test_matches_extended_precision_series(model, window):
    p = ShiftSequence.constant(window, 0.0)
    for n in (-5, 0, 4):
        exact = float(mu_bar_series_mp(model, 1.0, 0.0, n))
        assert mu_bar(model, 1.0, p, n) == pytest.approx(exact, rel=1e-10)


def test_underflow_is_flagged(model):
    profile = m_bar(model, 3.0, ShiftSequence.constant(IndexWindow(n_lo=-10, n_hi=14), 0.0))
    assert profile.underflow[-1]
    assert np.all(profile.m_bar > 0.0)
    assert np.isfinite(profile.log_m_bar).all()


def test_asymptotes(model):
    wide = IndexWindow(n_lo=-20, n_hi=14)
    report = asymptote_report(model, m_bar(model, 1.0, ShiftSequence.constant(wide, 0.0)))
    assert report.left_ok
    assert report.right_ok
    assert report.right_gap < 1e-2


def test_analytic_derivatives(model, profile, rng):
    result = derivative_check(model, profile, rng, samples=60)
    assert result["dA_max_rel_err"] < 1e-6
    assert result["dp_max_rel_err"] < 1e-6


def test_derivative_shapes(model, profile):
    assert log_derivative_pk(model, profile, 2, 1) == 0.0
    assert d_mbar_dpk(model, profile, 2, 1) == 0.0
    assert d_mbar_dA(profile, 0) == pytest.approx(-profile.value(0))


@pytest.mark.parametrize("M", [0.1, 1.0, 10.0])
def test_mass_round_trip(model, M):
    A = solve_A_for_mass(model, M, 0.0)
    assert mass_of(model, A, 0.0) == pytest.approx(M, rel=1e-10)


def test_mass_is_decreasing_in_A(model):
    masses = [mass_of(model, A, 0.02) for A in (0.1, 0.5, 1.0, 5.0)]
    assert all(a > b for a, b in zip(masses, masses[1:]))


def test_mass_does_not_depend_on_the_window(model):
    a = total_mass(m_bar(model, 1.0, ShiftSequence.constant(IndexWindow(n_lo=-40, n_hi=15), 0.0)))
    b = total_mass(m_bar(model, 1.0, ShiftSequence.constant(IndexWindow(n_lo=-40, n_hi=20), 0.0)))
    assert a == pytest.approx(b, rel=1e-10)


def test_mass_window_too_small(model):
    with pytest.raises(WindowTooSmall):
        total_mass(m_bar(model, 1e-3, ShiftSequence.constant(IndexWindow(n_lo=-10, n_hi=4), 0.0)))


def test_unreachable_mass(model):
    with pytest.raises(RangeError):
        solve_A_for_mass(model, 1e30, 0.0)
    with pytest.raises(RangeError):
        solve_A_for_mass(model, -1.0, 0.0)


def test_rejects_bad_A(model, window):
    with pytest.raises(RangeError):
        m_bar(model, 0.0, ShiftSequence.constant(window, 0.0))


def test_profile_frame(profile):
    frame = profile_frame(profile)
    assert list(frame.columns) == ["n", "p", "m_bar", "log_m_bar", "mu_bar", "mass_per_peak", "residual",
                                   "underflow"]
    assert len(frame) == profile.window.size
    assert np.isnan(frame["residual"].iloc[-1])


@settings(max_examples=25, deadline=None)
@given(A=st.floats(0.05, 20.0), rho=st.floats(-0.3, 0.3))
def test_recurrence_property(A, rho):
    profile = m_bar(KernelModel(), A, ShiftSequence.constant(IndexWindow(n_lo=-12, n_hi=8), rho))
    assert np.max(recurrence_residual(profile)) < 1e-9
