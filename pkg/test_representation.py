# test_representation.py

import math

import numpy as np
import pandas as pd
import pytest

from errors import DomainError, RangeError
from grid_sim import SimConfig, evolve, extract_moments, init_from_profile
from linear import WeightedSeq
from moment_ode import MomentState, integrate, state_from_profile
from representation import (Decomposition, decompose, empirical_constant, final_profile_comparison,
                            fixed_point_residual, initial_shift_correction, moment_bound, mu_bar_lipschitz,
                            reconstruct, remainder_sizes, remainders_R, remainders_r, rho_estimate,
                            stability_verdicts, state_bound_shapes, time_bound_shapes, track_decomposition,
                            wasserstein_profile, wasserstein_to_peak)
from stationary import IndexWindow, ShiftSequence, m_bar

WINDOW = IndexWindow(n_lo=-8, n_hi=6)


@pytest.fixture
def shift(rng):
    return ShiftSequence.from_values(WINDOW, 0.03 * rng.uniform(-1.0, 1.0, WINDOW.size))


def test_decompose_stationary(model):
    p = ShiftSequence.constant(WINDOW, 0.01)
    m = np.exp(m_bar(model, 1.7, p).log_m_bar)
    dec = decompose(model, m, p)
    assert dec.A == pytest.approx(1.7, rel=1e-12)
    assert np.max(np.abs(np.exp2(WINDOW.indices.astype(float)) * dec.y.values)) < 1e-12


def test_decompose_round_trip(model, shift, rng):
    ns = WINDOW.indices.astype(float)
    m = np.exp(m_bar(model, 0.8, shift).log_m_bar) * (1.0 + 0.05 * rng.uniform(-1.0, 1.0, WINDOW.size))
    dec = decompose(model, m, shift, N=4)
    assert dec.y.values[WINDOW.position(4)] == 0.0
    assert np.all(dec.y.values[ns > 4] == 0.0)
    rebuilt = reconstruct(model, dec)
    np.testing.assert_allclose(rebuilt[ns <= 4], m[ns <= 4], rtol=1e-10)
    assert np.all(rebuilt[ns > 4] == 0.0)


def test_decompose_rejects_bad_masses(model, shift):
    m = np.ones(WINDOW.size)
    m[2] = 0.0
    with pytest.raises(DomainError):
        decompose(model, m, shift)
    with pytest.raises(DomainError):
        decompose(model, np.ones(WINDOW.size), shift, N=9)
    # a huge top peak would need a negative A
    with pytest.raises(RangeError):
        decompose(model, np.full(WINDOW.size, 1e300), shift)


def test_shift_correction_matches_decomposition(model):
    p0 = ShiftSequence.constant(WINDOW, 0.0)
    pN = ShiftSequence.constant(WINDOW, 0.02)
    m = np.exp(m_bar(model, 1.3, p0).log_m_bar)
    A_N = decompose(model, m, pN, N=5).A
    assert A_N - 1.3 == pytest.approx(initial_shift_correction(model, p0, pN, 5), abs=1e-12)
    assert initial_shift_correction(model, p0, p0, 5) == 0.0


def test_remainders_vanish_at_the_stationary_state(model, shift):
    dec = Decomposition(1.1, WeightedSeq(WINDOW, np.zeros(WINDOW.size)), shift, WINDOW.n_hi)
    zeros = np.zeros(WINDOW.size)
    for r in remainders_r(model, dec, shift, zeros, zeros, 1.1):
        np.testing.assert_array_equal(r, 0.0)
    for R in remainders_R(model, dec, shift, zeros, 1.1):
        np.testing.assert_array_equal(R, 0.0)


def test_remainders_are_quadratic(model, shift, rng):
    base = rng.uniform(-1.0, 1.0, WINDOW.size) * np.exp2(-WINDOW.indices.astype(float))
    base[-1] = 0.0
    zeros = np.zeros(WINDOW.size)
    sizes = []
    for eps in (1e-3, 2e-3):
        dec = Decomposition(1.1, WeightedSeq(WINDOW, eps * base), shift, WINDOW.n_hi)
        r1, _, _ = remainders_r(model, dec, shift, zeros, zeros, 1.1)
        sizes.append(np.max(np.abs(r1)))
    assert sizes[1] / sizes[0] == pytest.approx(4.0, rel=1e-6)


def test_remainders_zero_above_truncation(model, shift, rng):
    y = 1e-3 * rng.uniform(-1.0, 1.0, WINDOW.size)
    y[WINDOW.indices >= 3] = 0.0
    dec = Decomposition(1.1, WeightedSeq(WINDOW, y), shift, 3)
    q = np.full(WINDOW.size, 1e-4)
    dpdt = 1e-2 * rng.uniform(-1.0, 1.0, WINDOW.size)
    for r in (*remainders_r(model, dec, shift, dpdt, q, 1.0), *remainders_R(model, dec, shift, q, 1.0)):
        assert np.all(r[WINDOW.indices > 3] == 0.0)


def test_mu_bar_lipschitz(model):
    p = ShiftSequence.constant(WINDOW, 0.0)
    ratio = mu_bar_lipschitz(model, p, 1.0, 1.01, 1.0)
    assert np.all(np.isfinite(ratio))
    assert np.max(ratio) < 10.0
    with pytest.raises(DomainError):
        mu_bar_lipschitz(model, p, 1.0, 1.0, 1.0)


def test_empirical_constant():
    assert empirical_constant([1.0, 2.0], [2.0, 2.0]) == 1.0
    assert empirical_constant([0.0, 1.0], [0.0, 4.0]) == 0.25
    assert empirical_constant([0.0], [0.0]) == 0.0
    assert empirical_constant([1.0], [0.0]) == math.inf


def test_wasserstein_to_shifted_peak():
    m = np.ones(WINDOW.size)
    p = np.full(WINDOW.size, 0.1)
    q = np.full(WINDOW.size, 0.01)
    state = MomentState(WINDOW, 0.0, m, p, q, delta0=0.15)
    assert wasserstein_to_peak(state, 0.0, 0) == pytest.approx(math.sqrt(0.02), rel=1e-14)
    assert wasserstein_to_peak(state, 0.0, 0) == pytest.approx(0.141421, rel=1e-6)
    absent = MomentState(WINDOW, 0.0, np.where(WINDOW.indices > 2, 0.0, 1.0), p, q, N=2)
    assert np.isnan(wasserstein_profile(absent, 0.0)[-1])
    with pytest.raises(DomainError):
        wasserstein_to_peak(absent, 0.0, 4)


def test_wasserstein_of_grid_comb(model):
    config = SimConfig(kernel=model, window=IndexWindow(n_lo=-6, n_hi=4), cells_per_interval=16, rho_align=0.02)
    grid = init_from_profile(m_bar(model, 1.0, ShiftSequence.constant(config.window, 0.02)), config)
    np.testing.assert_allclose(wasserstein_profile(grid, 0.02), 0.0, atol=1e-15)


def test_moment_bound(model):
    state = state_from_profile(m_bar(model, 1.0, ShiftSequence.constant(WINDOW, 0.0)))
    assert moment_bound([state], 0.0) == pytest.approx(float(state.m.sum()))


def test_track_and_rho_estimate(model, shift):
    profile = m_bar(model, 1.0, shift)
    state = state_from_profile(profile, N=5)
    trajectory = integrate(model, state, 1.0, sample_times=np.linspace(0.0, 1.0, 11))
    track = track_decomposition(model, trajectory)
    assert list(track.frame.columns) == ["t", "A", "y_l1", "y_beta", "A_gap", "dA_dt"]
    assert len(track.frame) == 11
    assert track.frame["y_l1"].iloc[0] < 1e-10
    rho_hat, times, spread = rho_estimate(trajectory)
    assert abs(rho_hat) <= 0.03
    assert spread[-1] <= spread[0] + 1e-8


def test_fixed_point_of_stationary_trajectory(model):
    state = state_from_profile(m_bar(model, 1.0, ShiftSequence.constant(WINDOW, 0.0)), N=5)
    trajectory = integrate(model, state, 0.5, sample_times=np.linspace(0.0, 0.5, 6))
    A_M = track_decomposition(model, trajectory).frame["A"].iloc[0]
    result = fixed_point_residual(model, trajectory, A_M)
    assert result["residual"] < 1e-8
    assert result["trace"].shape == (6,)


@pytest.mark.slow
def test_grid_run_decomposes(model):
    config = SimConfig(kernel=model, window=IndexWindow(n_lo=-6, n_hi=4), cells_per_interval=16, n_trunc=3)
    profile = m_bar(model, 1.0, ShiftSequence.constant(config.window, 0.0))
    factors = 1.0 + 0.02 * np.exp2(-config.window.indices.astype(float)) * np.cos(config.window.indices)
    factors[config.window.indices > 3] = 1.0
    _, snapshots = evolve(init_from_profile(profile, config, perturbation=factors), 0.5, [0.0, 0.25, 0.5])
    track = track_decomposition(model, [extract_moments(s) for s in snapshots])
    assert np.all(np.isfinite(track.frame["A"]))


def test_wasserstein_matches_optimal_transport(model, small_config):
    ot = pytest.importorskip("ot")
    grid = init_from_profile(m_bar(model, 1.0, ShiftSequence.constant(small_config.window, 0.0)), small_config,
                             blob_width=0.006)
    n = 1
    i = small_config.window.position(n)
    weights = grid.masses[i] / grid.masses[i].sum()
    # POT returns the transport cost, i.e. W2 squared
    cost = ot.wasserstein_1d(grid.xs[i], np.array([n + 0.01]), weights, np.array([1.0]), p=2)
    assert wasserstein_to_peak(grid, 0.01, n) ** 2 == pytest.approx(float(cost), rel=1e-9)


def test_final_profile_of_limit_comb(model):
    state = state_from_profile(m_bar(model, 1.3, ShiftSequence.constant(WINDOW, 0.02)), N=4)
    frame = final_profile_comparison(model, state, 1.3, 0.02)
    assert list(frame.columns) == ["n", "m_final", "a_limit", "rel_err"]
    assert frame["n"].max() == 4
    assert frame["rel_err"].max() < 1e-12


def test_final_profile_sees_mass_error(model):
    state = state_from_profile(m_bar(model, 1.3, ShiftSequence.constant(WINDOW, 0.0)))
    m = state.m.copy()
    m[WINDOW.position(0)] *= 1.05
    moved = MomentState(WINDOW, 0.0, m, state.p, state.q)
    frame = final_profile_comparison(model, moved, 1.3, 0.0).set_index("n")
    assert frame.loc[0, "rel_err"] == pytest.approx(0.05, rel=1e-9)
    assert frame.drop(index=0)["rel_err"].max() < 1e-12


def _synthetic_envelopes():
    t = np.linspace(0.0, 12.0, 49)
    q = 0.01 * np.exp(-t)
    return t, q, 0.02 * np.exp(-t), np.sqrt(q)


def test_stability_verdicts_pass():
    t, q, spread, w2 = _synthetic_envelopes()
    profile = pd.DataFrame({"n": [-9, 0, 8], "rel_err": [0.5, 1e-4, 2e-3]})
    verdicts = stability_verdicts(t, q, spread, w2, 0.05, profile)
    assert verdicts.passed
    assert verdicts.q_nu == pytest.approx(1.0, rel=1e-8)
    assert verdicts.w2_rate_ratio == pytest.approx(1.0, rel=1e-8)
    assert verdicts.spread_time == pytest.approx(3.0)
    assert verdicts.profile_max_rel_err == pytest.approx(2e-3)
    assert set(verdicts.as_dict()) >= {"q_envelope_ok", "spread_ok", "profile_ok", "w2_ok", "passed"}


def test_stability_verdicts_fail():
    t, q, spread, w2 = _synthetic_envelopes()
    good = pd.DataFrame({"n": [0], "rel_err": [1e-4]})
    assert not stability_verdicts(t, 100.0 * q, spread, w2, 0.05, good).q_envelope_ok
    assert not stability_verdicts(t, q, 0.02 + 0.0 * t, w2, 0.05, good).spread_ok
    assert not stability_verdicts(t, q, spread, w2, 0.05, pd.DataFrame({"n": [3], "rel_err": [0.02]})).profile_ok
    slow = stability_verdicts(t, q, spread, np.exp(-0.1 * t), 0.05, good)
    assert not slow.w2_ok
    assert not slow.passed


def test_stability_verdicts_with_zero_variances():
    t, q, spread, w2 = _synthetic_envelopes()
    verdicts = stability_verdicts(t, 0.0 * q, spread, spread, 0.05, pd.DataFrame({"n": [0], "rel_err": [0.0]}))
    assert verdicts.q_envelope_ok and verdicts.q_nu is None
    assert verdicts.w2_ok


def test_remainder_sizes_scale_with_their_bounds(model, shift, rng):
    ns = WINDOW.indices.astype(float)
    base = rng.uniform(-1.0, 1.0, WINDOW.size) * np.exp2(-ns)
    base[-1] = 0.0
    dpdt = rng.uniform(-1.0, 1.0, WINDOW.size)
    q = rng.uniform(0.0, 1.0, WINDOW.size)
    ratios = []
    for eps in (1e-3, 2e-3):
        dec = Decomposition(1.1, WeightedSeq(WINDOW, eps * base), shift, WINDOW.n_hi)
        sizes = remainder_sizes(model, dec, shift, eps * dpdt, eps * q, 1.1)
        shapes = state_bound_shapes(model, dec, shift, eps * dpdt, eps * q, 1.1)
        assert set(sizes) == set(shapes)
        ratios.append({name: sizes[name] / shapes[name] for name in ("r1", "r1_N", "r3", "r3_N")})
    for name, value in ratios[0].items():
        assert ratios[1][name] == pytest.approx(value, rel=0.05), name


def test_remainder_sizes_vanish_at_the_stationary_state(model, shift):
    dec = Decomposition(1.1, WeightedSeq(WINDOW, np.zeros(WINDOW.size)), shift, WINDOW.n_hi)
    zeros = np.zeros(WINDOW.size)
    sizes = remainder_sizes(model, dec, shift, zeros, zeros, 1.1)
    assert all(value == 0.0 for value in sizes.values())


def test_time_bound_shapes(model):
    early = time_bound_shapes(0.1, 0.05, 0.5, model.beta)
    late = time_bound_shapes(4.0, 0.05, 0.5, model.beta)
    assert set(early) == {"r2", "r2_N", "r3", "r3_N", "R1", "R2", "R3"}
    assert all(late[name] < early[name] for name in early)
    assert late["R3"] == pytest.approx(0.05 ** 2 * math.exp(-1.0))
    with pytest.raises(DomainError):
        time_bound_shapes(0.0, 0.05, 0.5, model.beta)


def test_stability_verdicts_of_exact_comb():
    t = np.linspace(0.0, 12.0, 49)
    zeros = np.zeros(t.size)
    verdicts = stability_verdicts(t, zeros, zeros, zeros, 0.05, pd.DataFrame({"n": [0], "rel_err": [0.0]}))
    assert verdicts.passed
    assert verdicts.spread_time == 0.0
