# peakdyn.py

"""
peakdyn: batch experiments on stationary Dirac-peak combs of the
coagulation-fragmentation equation.

    python peakdyn.py <kind> --config experiment.yaml [--out DIR] [--seed N] [--threads K]

kinds: stationary, simulate, moments, linear, stability, verify-bounds.
Every run directory receives CSV tables, summary.json, manifest.json and
plots.gp. Exit codes: 0 success, 2 config error, 3 hypothesis violation,
4 numerical failure (diagnostic.json written).
"""

import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError
from scipy.integrate import quad

from artifacts import PlotSpec, RunDirectory
from errors import ConfigError, DomainError, HypothesisViolation, NumericalFailure
from grid_sim import (SimConfig, evolve, extract_moments, init_from_profile, left_edge_flux, snapshot_frame,
                      support_leakage, xi_mass)
from kernels import validate_assumptions
from linear import (SigmaCoeffs, WeightedSeq, decay_traces, delta1_for_theta, fit_decay, fundamental_psi,
                    hatq_supersolution, poincare_constant, psi_difference_constant, sample_poincare_sup)
from moment_ode import (ORACLE_TOLERANCES, ClosureOptions, MomentState, integrate, mass_identity_check, oracle_gap,
                        rhs_p, taylor_identity_check)
from representation import (Decomposition, decompose, empirical_constant, final_profile_comparison, mu_bar_lipschitz,
                            remainder_sizes, remainders_R, remainders_r, rho_estimate, stability_verdicts,
                            state_bound_shapes, time_bound_shapes, track_decomposition, wasserstein_profile)
from settings import KINDS, ExperimentConfig, env_settings, expand_sweep, experiment_label, load_config
from stationary import (IndexWindow, ShiftSequence, asymptote_report, derivative_check, m_bar, mass_of,
                        profile_frame, recurrence_residual, solve_A_for_mass)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_HYPOTHESIS = 3
EXIT_NUMERICAL = 4

# peaks lighter than this at t = 0 are cut off by the truncation index
TRUNCATION_MASS = 1e-200


######################################################################################
############################ SHARED SET-UP ###########################################
######################################################################################

@dataclass
class InitialData:
    """Target comb and the perturbed data m_n = m_bar_n(A0, p0)(1 + 2^n y0_n)."""

    A_M: float
    A0: float
    p0: ShiftSequence
    y0: np.ndarray
    N: int

    @property
    def factors(self) -> np.ndarray:
        ns = self.p0.window.indices.astype(float)
        return 1.0 + np.exp2(ns) * self.y0


def target_A(config: ExperimentConfig) -> float:
    """A_M from the mass M (or the configured A), with the mass round trip logged."""
    model = config.kernel
    if not config.uses_mass:
        return config.A
    A_M = solve_A_for_mass(model, config.M, config.rho)
    logger.info("A_M=%.12g for M=%g, rho=%g (mass round trip %.3e)", A_M, config.M, config.rho,
                abs(mass_of(model, A_M, config.rho) / config.M - 1.0))
    return A_M


def truncation_index(config: ExperimentConfig, A: float, p: ShiftSequence) -> int:
    """Configured N, lowered until the initial top peak is above TRUNCATION_MASS."""
    N = config.simulation.n_trunc or config.window.n_hi
    profile = m_bar(config.kernel, A, p)
    floor = math.log(TRUNCATION_MASS)
    while N > config.window.n_lo + 1 and profile.log_value(N) < floor:
        N -= 1
    return N


def initial_data(config: ExperimentConfig, rng: np.random.Generator) -> InitialData:
    window = config.window
    A_M = target_A(config)
    pert = config.perturbation
    ns = window.indices.astype(float)

    # STEP 1: shift noise, kept inside the interval together with any blob
    room = config.delta0 - 3.0 * config.simulation.blob_width - abs(config.rho)
    shift_amp = min(pert.shift_amplitude, max(room, 0.0))
    if shift_amp < pert.shift_amplitude:
        logger.warning("shift amplitude reduced from %g to %g to stay inside the intervals",
                       pert.shift_amplitude, shift_amp)
    p = config.rho + shift_amp * rng.uniform(-1.0, 1.0, window.size)
    p0 = ShiftSequence.from_values(window, p, p_inf=config.rho, p_lo_ext=float(p[0]))

    # STEP 2: mass perturbation y0_n = amplitude 2^-n U(-1, 1)
    y0 = pert.amplitude * np.exp2(-ns) * rng.uniform(-1.0, 1.0, window.size)
    A0 = A_M + pert.A_offset
    N = truncation_index(config, A0, p0)
    y0[window.indices > N] = 0.0
    return InitialData(A_M, A0, p0, y0, N)


def check_hypotheses(config: ExperimentConfig, data: InitialData) -> dict:
    """Smallness of the initial data around the target comb; raises HypothesisViolation."""
    y_norm = WeightedSeq(config.window, data.y0).norm(1.0)
    A_gap = abs(data.A0 - data.A_M)
    p_dev = float(np.max(np.abs(data.p0.p)))
    report = {"y0_l1": y_norm, "A_gap": A_gap, "p0_max": p_dev, "delta0": config.delta0}
    if y_norm > config.delta0:
        raise HypothesisViolation(f"||y0||_1={y_norm:.4g} exceeds delta0={config.delta0}")
    if A_gap > config.delta0:
        raise HypothesisViolation(f"|A0 - A_M|={A_gap:.4g} exceeds delta0={config.delta0}")
    if p_dev > config.delta0:
        raise HypothesisViolation(f"max |p0_n|={p_dev:.4g} exceeds delta0={config.delta0}")
    if np.any(data.factors <= 0.0):
        raise HypothesisViolation("perturbed masses are not positive")
    return report


def sim_config(config: ExperimentConfig, N: int) -> SimConfig:
    s = config.simulation
    try:
        return SimConfig(kernel=config.kernel, window=config.window, delta0=config.delta0,
                         cells_per_interval=s.cells_per_interval, n_trunc=N, dt_safety=s.dt_safety,
                         rho_align=config.rho, scheme=s.scheme)
    except ValidationError as e:
        raise ConfigError(f"simulation settings rejected: {e}") from e


def closure_of(config: ExperimentConfig) -> ClosureOptions:
    if config.simulation.closure == "gaussian":
        return ClosureOptions(drop_oq_terms=False, oq_gaussian=True)
    return ClosureOptions()


def sample_times(config: ExperimentConfig) -> list:
    return np.linspace(0.0, config.simulation.t_end, config.simulation.samples).tolist()


def run_grid(config: ExperimentConfig, data: InitialData):
    cfg = sim_config(config, data.N)
    profile = m_bar(config.kernel, data.A0, data.p0)
    state0 = init_from_profile(profile, cfg, config.simulation.blob_width, data.factors)
    _, snapshots = evolve(state0, config.simulation.t_end, sample_times(config))
    return snapshots


def initial_moments(config: ExperimentConfig, data: InitialData) -> MomentState:
    """Moments of the perturbed initial data; variances are those of the configured blob."""
    profile = m_bar(config.kernel, data.A0, data.p0)
    m0 = np.exp(profile.log_m_bar) * data.factors
    m0[config.window.indices > data.N] = 0.0
    q0 = np.full(config.window.size, config.simulation.blob_width ** 2)
    return MomentState(config.window, 0.0, m0, data.p0.p.copy(), q0, config.delta0, data.N)


def moments_frame(states) -> pd.DataFrame:
    return pd.concat([s.frame() for s in states], ignore_index=True)


def _fit_or_none(times, values, t_burn, fit_power=False):
    try:
        return fit_decay(times, values, t_burn=t_burn, fit_power=fit_power).as_dict()
    except DomainError as e:
        logger.info("no decay fit: %s", e)
        return None


######################################################################################
############################ EXPERIMENTS #############################################
######################################################################################

def run_stationary(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    model = config.kernel
    report = validate_assumptions(model)
    out.write_csv("kernel_report.csv", pd.DataFrame(report.as_rows()))

    A = target_A(config)
    shift = ShiftSequence.constant(config.window, config.rho)
    profile = m_bar(model, A, shift)
    out.write_csv("profile.csv", profile_frame(profile))

    # right-tail asymptotics need a few more peaks above the window
    wide = IndexWindow(n_lo=min(config.window.n_lo, -20), n_hi=max(config.window.n_hi, 14))
    tails = asymptote_report(model, m_bar(model, A, ShiftSequence.constant(wide, config.rho)))
    derivs = derivative_check(model, profile, rng)
    out.write_plots([PlotSpec("profile.csv", "n", ["m_bar", "mass_per_peak"], "stationary comb", True)])
    return {
        "A": A,
        "M": mass_of(model, A, config.rho),
        "rho": config.rho,
        "max_recurrence_residual": float(np.max(recurrence_residual(profile))),
        "left_ratio": tails.left_ratio, "left_ok": tails.left_ok,
        "right_cauchy": tails.right_cauchy, "right_ok": tails.right_ok,
        "derivative_check": derivs,
        "kernel_assumptions_passed": report.passed,
    }


def run_simulate(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    data = initial_data(config, rng)
    snapshots = run_grid(config, data)
    moments = [extract_moments(s) for s in snapshots]
    out.write_csv("moments.csv", moments_frame(moments))
    out.write_csv("final_cells.csv", snapshot_frame(snapshots[-1]))
    xi0 = xi_mass(snapshots[0])
    trace = pd.DataFrame({
        "t": [s.time for s in snapshots],
        "xi_mass_defect": [abs(xi_mass(s) / xi0 - 1.0) for s in snapshots],
        "support_leakage": [support_leakage(s) for s in snapshots],
        "left_edge_flux": [left_edge_flux(s) for s in snapshots],
    })
    out.write_csv("conservation.csv", trace)
    out.write_plots([PlotSpec("conservation.csv", "t", ["xi_mass_defect", "left_edge_flux"], "conservation", True)])
    return {"N": data.N, "xi_mass": xi0, "max_mass_defect": float(trace["xi_mass_defect"].max()),
            "max_support_leakage": float(trace["support_leakage"].max())}


def run_moments(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    data = initial_data(config, rng)
    trajectory = integrate(config.kernel, initial_moments(config, data), config.simulation.t_end,
                           sample_times=sample_times(config),
                           closure=closure_of(config))
    out.write_csv("moments.csv", moments_frame(trajectory))
    rho_hat, times, spread = rho_estimate(trajectory)
    out.write_csv("alignment.csv", pd.DataFrame({"t": times, "p_spread": spread}))
    plots = [PlotSpec("alignment.csv", "t", ["p_spread"], "centroid alignment", True)]
    summary = {"N": data.N, "rho_hat": rho_hat, "final_spread": float(spread[-1]),
               "spread_fit": _fit_or_none(times, spread, 0.5)}

    # CHECK: the same initial data on the grid
    if config.simulation.compare_grid:
        reference = [extract_moments(s) for s in run_grid(config, data)]
        gap = oracle_gap(trajectory, reference)
        out.write_csv("oracle_gap.csv", gap)
        plots.append(PlotSpec("oracle_gap.csv", "t", ["m_rel", "p_abs", "q_rel"], "moments vs grid", True))
        worst = {key: float(gap[key].max()) for key in ORACLE_TOLERANCES}
        summary["oracle_gap"] = worst
        summary["oracle_agrees"] = all(worst[key] <= tol for key, tol in ORACLE_TOLERANCES.items())
        if not summary["oracle_agrees"]:
            logger.warning("moment closure drifts from the grid: %s", worst)
    out.write_plots(plots)
    return summary


def run_linear(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    model = config.kernel
    lin = config.linear
    A_M = target_A(config)
    window = config.window
    coeffs = SigmaCoeffs(model, window, A_M, kind="constant", rho=config.rho)
    defect = coeffs.sigma_limit_defect()
    if defect > lin.eta0 * coeffs.factor:
        logger.warning("sigma at n_lo is %.3g away from its limit: outside the decay hypotheses", defect)

    # STEP 1: decay traces for each (theta, theta_tilde)
    times = np.linspace(0.0, lin.t_end, lin.samples)
    ns = window.indices.astype(float)
    rows, fits = [], []
    for theta, theta_tilde in lin.theta_pairs:
        weight = np.where(ns <= 0, np.exp2(-ns), np.exp2(-theta * ns))
        y0 = WeightedSeq(window, weight * rng.uniform(-1.0, 1.0, window.size), theta)
        d_plus, gap = decay_traces(model, coeffs, y0, times, theta_tilde)
        for t, a, b in zip(times, d_plus, gap):
            rows.append({"theta": theta, "theta_tilde": theta_tilde, "t": t, "d_plus_norm": a, "limit_gap": b})
        fit = _fit_or_none(times, d_plus, lin.t_burn, fit_power=True)
        fits.append({"theta": theta, "theta_tilde": theta_tilde, "y0_norm": y0.norm(),
                     "expected_power": (theta_tilde - theta) / model.beta, "fit": fit})
    out.write_csv("decay.csv", pd.DataFrame(rows))

    # STEP 2: fundamental solution identities
    psi_rows = []
    for ell in lin.psi_ells:
        lam = 2.0 ** (model.beta * ell) / 4.0
        for n in range(ell, ell + lin.psi_max_gap + 1):
            integral, _ = quad(lambda s: fundamental_psi(model.beta, ell, n, s), 0.0, np.inf, limit=200)
            psi_rows.append({"ell": ell, "n": n, "normalization": lam * integral})
    psi = pd.DataFrame(psi_rows)
    out.write_csv("psi.csv", psi)
    psi_c = psi_difference_constant(model.beta, min(lin.psi_ells), min(lin.psi_ells) + lin.psi_max_gap,
                                     np.linspace(0.0, 4.0, 41))

    # STEP 3: Poincare constant
    profile = m_bar(model, A_M, ShiftSequence.constant(window, config.rho))
    c0 = poincare_constant(model, profile)
    c0_mc = sample_poincare_sup(model, profile, rng, lin.poincare_samples)
    nus = [f["fit"]["nu"] for f in fits if f["fit"] is not None]
    out.write_plots([PlotSpec("decay.csv", "t", ["d_plus_norm", "limit_gap"], "linear decay", True)])
    return {
        "A_M": A_M,
        "sigma_limit_defect": defect,
        "fits": fits,
        "psi_max_normalization_error": float(np.max(np.abs(psi["normalization"] - 1.0))),
        "psi_difference_constant": psi_c,
        "poincare_c0": c0,
        "poincare_c0_sampled": c0_mc,
        "nu_from_c0": 1.0 / (4.0 * c0) if c0 > 0 else None,
        "nu_fitted_min": min(nus) if nus else None,
    }


def run_stability(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    model = config.kernel
    data = initial_data(config, rng)
    hypotheses = check_hypotheses(config, data)
    snapshots = run_grid(config, data)
    moments = [extract_moments(s) for s in snapshots]
    out.write_csv("moments.csv", moments_frame(moments))

    # STEP 1: decomposition around the target comb
    track = track_decomposition(model, moments, data.A_M, data.N)
    out.write_csv("decomposition.csv", track.frame)

    # STEP 2: alignment, concentration, conservation
    rho_hat, times, spread = rho_estimate(moments)
    w2 = [float(np.nanmax(wasserstein_profile(s, rho_hat))) for s in moments]
    q_sup = [float(np.max(s.q[s.present])) for s in moments]
    xi0 = xi_mass(snapshots[0])
    envelopes = pd.DataFrame({
        "t": times, "p_spread": spread, "q_sup": q_sup, "w2_sup": w2,
        "y_beta": track.frame["y_beta"].to_numpy(),
        "xi_mass_defect": [abs(xi_mass(s) / xi0 - 1.0) for s in snapshots],
    })
    out.write_csv("envelopes.csv", envelopes)

    # STEP 3: limit comb
    M_final = xi_mass(snapshots[-1])
    A_limit = solve_A_for_mass(model, M_final, rho_hat)
    A_final = float(track.frame["A"].iloc[-1])
    mass_check = mass_identity_check(moments[-1], M_final)
    final_profile = final_profile_comparison(model, moments[-1], A_limit, rho_hat, data.N)
    out.write_csv("final_profile.csv", final_profile)
    out.write_plots([
        PlotSpec("envelopes.csv", "t", ["p_spread", "q_sup", "w2_sup", "y_beta"], "stability envelopes", True),
        PlotSpec("decomposition.csv", "t", ["A_gap"], "|A(t) - A_M|", True),
        PlotSpec("final_profile.csv", "n", ["rel_err"], "final profile vs limit comb", True),
    ])
    t_burn = config.linear.t_burn

    # CHECK: verdicts on the envelopes and the final profile
    verdicts = stability_verdicts(times, q_sup, spread, w2, config.delta0, final_profile, t_burn)
    return {
        "verdicts": verdicts.as_dict(),
        "hypotheses": hypotheses,
        "N": data.N,
        "A_M": data.A_M,
        "rho_hat": rho_hat,
        "final_spread": float(spread[-1]),
        "A_final": A_final,
        "A_limit": A_limit,
        "A_limit_rel_err": abs(A_final / A_limit - 1.0),
        "max_mass_defect": float(envelopes["xi_mass_defect"].max()),
        "mass_identity": mass_check,
        "fits": {
            "p_spread": _fit_or_none(times, spread, t_burn),
            "q_sup": _fit_or_none(times, q_sup, t_burn),
            "w2_sup": _fit_or_none(times, w2, t_burn),
            "y_beta": _fit_or_none(times, envelopes["y_beta"].to_numpy(), t_burn),
        },
    }


def _half_sample_row(name: str, bound: str, norms, bounds) -> dict:
    half = len(norms) // 2
    c_full = empirical_constant(norms, bounds)
    c_half = empirical_constant(norms[:half], bounds[:half]) if half else c_full
    stable = bool(c_full <= 1.1 * c_half) if math.isfinite(c_full) else False
    return {"remainder": name, "bound": bound, "C_full": c_full, "C_half": c_half, "stable": stable}


# remainder -> description of the right-hand side it is sampled against
STATE_BOUNDS = {
    "r1": "|y|_beta^2 + |A_M - A| |y|_beta",
    "r1_N": "|y|_beta |y|_1",
    "r2": "|q|_theta2",
    "r2_N": "max(q_N-1, q_N)",
    "r3": "|dp/dt|_theta1",
    "r3_N": "2^-N |dp_N/dt|",
    "R1": "|y|_beta |D+ p|_theta1",
    "R1_N": "|y|_1 |p_N-1 - p_N|",
    "R2": "|q|_theta2",
    "R2_N": "max(q_N-1, q_N)",
    "R3": "|A_M - A| |D+ p|_0",
}


def verify_trajectory(config: ExperimentConfig, rng: np.random.Generator) -> tuple[pd.DataFrame, dict]:
    """
    Remainder sizes along a moment trajectory against their time profiles.

    Returns:
        (frame with t and <name>_norm / <name>_bound columns, summary)
    """
    model = config.kernel
    b = config.bounds
    data = initial_data(config, rng)
    closure = closure_of(config)
    times = np.linspace(0.0, b.trajectory_t_end, b.trajectory_samples)
    trajectory = integrate(model, initial_moments(config, data), b.trajectory_t_end, sample_times=times.tolist(),
                           closure=closure)
    track = track_decomposition(model, trajectory, data.A_M, data.N)

    # STEP 1: decay rate of the variances, the configured one when no fit is possible
    q_sup = [float(np.max(s.q[s.present])) if s.present.any() else 0.0 for s in trajectory]
    fit = _fit_or_none(times, q_sup, config.linear.t_burn)
    nu = fit["nu"] if fit is not None and fit["nu"] > 0.0 else b.hatq_nu

    # STEP 2: sizes against the time profiles (state shapes where no time profile exists)
    rows = []
    for s, dec in zip(trajectory, track.decompositions):
        if s.t <= 0.0:
            continue
        dpdt = rhs_p(model, s, closure=closure)
        sizes = remainder_sizes(model, dec, s.shift(), dpdt, s.q, data.A_M, b.theta1, b.theta2)
        shapes = state_bound_shapes(model, dec, s.shift(), dpdt, s.q, data.A_M, b.theta1, b.theta2)
        shapes.update(time_bound_shapes(s.t, config.delta0, nu, model.beta, b.theta1, b.theta2))
        row = {"t": s.t}
        for name in STATE_BOUNDS:
            row[f"{name}_norm"] = sizes[name]
            row[f"{name}_bound"] = shapes[name]
        rows.append(row)
    frame = pd.DataFrame(rows)
    constants = {name: empirical_constant(frame[f"{name}_norm"], frame[f"{name}_bound"]) for name in STATE_BOUNDS}
    summary = {"nu": nu, "nu_fitted": fit is not None and fit["nu"] > 0.0, "constants": constants,
               "all_finite": all(math.isfinite(c) for c in constants.values())}
    logger.info("trajectory remainder constants: %s", constants)
    return frame, summary


def run_verify_bounds(config: ExperimentConfig, out: RunDirectory, rng: np.random.Generator) -> dict:
    model = config.kernel
    window = config.window
    A_M = target_A(config)
    b = config.bounds
    p = ShiftSequence.constant(window, config.rho)
    ns = window.indices.astype(float)
    N = window.n_hi

    # STEP 1: zero-input rows
    zero = Decomposition(A_M, WeightedSeq(window, np.zeros(window.size)), p, N)
    r_zero = remainders_r(model, zero, p, np.zeros(window.size), np.zeros(window.size), A_M)
    R_zero = remainders_R(model, zero, p, np.zeros(window.size), A_M)
    zero_max = max(float(np.max(np.abs(r))) for r in (*r_zero, *R_zero))

    # STEP 2: random admissible inputs for every remainder, the n = N rows included
    inner = ns <= 0
    rows = []
    for _ in range(b.samples):
        amp = config.delta0 * rng.uniform(0.01, 1.0)
        y = amp * np.exp2(-ns) * rng.uniform(-1.0, 1.0, window.size)
        y[-1] = 0.0
        A = A_M * (1.0 + 0.1 * config.delta0 * rng.uniform(-1.0, 1.0))
        shifts = np.clip(config.rho + 0.5 * config.delta0 * rng.uniform(-1.0, 1.0, window.size),
                         -config.delta0, config.delta0)
        pv = ShiftSequence.from_values(window, shifts, p_inf=config.rho, p_lo_ext=float(shifts[0]))
        dpdt = amp * rng.uniform(-1.0, 1.0, window.size) * np.where(inner, 1.0, np.exp2(-b.theta1 * ns))
        q = amp * config.delta0 * rng.uniform(0.0, 1.0, window.size) * np.where(inner, 1.0, np.exp2(-b.theta2 * ns))
        dec = decompose(model, np.exp(m_bar(model, A, pv).log_m_bar) * (1.0 + np.exp2(ns) * y), pv, N)
        sizes = remainder_sizes(model, dec, pv, dpdt, q, A_M, b.theta1, b.theta2)
        shapes = state_bound_shapes(model, dec, pv, dpdt, q, A_M, b.theta1, b.theta2)
        row = {}
        for name in STATE_BOUNDS:
            row[f"{name}_norm"] = sizes[name]
            row[f"{name}_bound"] = shapes[name]
        rows.append(row)
    table = pd.DataFrame(rows)
    out.write_csv("remainder_samples.csv", table)
    constants = pd.DataFrame([
        _half_sample_row(name, bound, table[f"{name}_norm"].to_numpy(), table[f"{name}_bound"].to_numpy())
        for name, bound in STATE_BOUNDS.items()
    ])
    out.write_csv("bound_constants.csv", constants)

    # STEP 3: Lipschitz bound of mu_bar in A
    lip = []
    for _ in range(min(b.samples, 200)):
        A1, A2 = A_M * rng.uniform(0.5, 2.0, 2)
        if A1 != A2:
            lip.append(float(np.max(mu_bar_lipschitz(model, p, A1, A2, A_M))))

    # STEP 4: supersolution sandwich
    sandwich = hatq_supersolution(model, b.hatq_n0, config.delta0, b.hatq_delta1, b.hatq_nu,
                                  np.linspace(0.1, b.hatq_t_end, 100), extend=b.hatq_extend)

    # STEP 5: Taylor identities on Gaussian blobs
    blob = config.delta0 / 8.0
    cfg = sim_config(config, N)
    grid = init_from_profile(m_bar(model, A_M, p), cfg, blob)
    taylor = taylor_identity_check(model, grid)
    out.write_csv("taylor.csv", taylor.table)

    # STEP 6: the same remainders along a moment trajectory
    trajectory, along = verify_trajectory(config, rng)
    out.write_csv("trajectory_bounds.csv", trajectory)
    out.write_plots([
        PlotSpec("remainder_samples.csv", "r1_bound", ["r1_norm"], "quadratic remainder", True),
        PlotSpec("trajectory_bounds.csv", "t", ["r2_norm", "r3_norm", "R1_norm", "R2_norm", "R3_norm"],
                 "remainders along a trajectory", True),
    ])
    by_name = constants.set_index("remainder")
    return {
        "zero_input_max": zero_max,
        "constants": {name: {"C_full": float(r["C_full"]), "C_half": float(r["C_half"]), "stable": bool(r["stable"])}
                      for name, r in by_name.iterrows()},
        "constants_stable": bool(constants["stable"].all()),
        "mu_bar_lipschitz": max(lip) if lip else None,
        "hatq": {**sandwich.as_dict(), "delta1_roundtrip": delta1_for_theta(sandwich.theta2)},
        "taylor_max_ratio": taylor.max_ratio,
        "trajectory": along,
    }


RUNNERS = {
    "stationary": run_stationary,
    "simulate": run_simulate,
    "moments": run_moments,
    "linear": run_linear,
    "stability": run_stability,
    "verify-bounds": run_verify_bounds,
}


######################################################################################
############################ DRIVER ##################################################
######################################################################################

def run_experiment(config: ExperimentConfig, base: Path) -> dict:
    """Runs one experiment in its own directory; numerical failures leave a diagnostic.json."""
    out = RunDirectory(base / experiment_label(config))
    rng = np.random.default_rng(config.seed)
    logger.info("running %s into %s", config.kind, out.path)
    try:
        summary = RUNNERS[config.kind](config, out, rng)
    except NumericalFailure as e:
        out.write_diagnostic(e, config.kind)
        raise
    summary = {"kind": config.kind, "seed": config.seed, **summary}
    out.write_json("summary.json", summary)
    out.write_manifest(config.model_dump(mode="json"), config.seed, config.kind)
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peakdyn", description="Dirac-peak stability experiments")
    parser.add_argument("kind", choices=KINDS, help="experiment to run")
    parser.add_argument("--config", type=Path, help="YAML experiment file (defaults when omitted)")
    parser.add_argument("--out", type=Path, help="output directory (beats PEAKDYN_OUT and the config)")
    parser.add_argument("--seed", type=int, help="64-bit seed overriding the config")
    parser.add_argument("--threads", type=int, help="worker threads for sweeps (beats PEAKDYN_THREADS)")
    parser.add_argument("--override", action="append", default=[], metavar="PATH=VALUE",
                        help="dotted config override, e.g. --override simulation.t_end=2")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    parser.add_argument("--log-level", help="overrides PEAKDYN_LOG_LEVEL")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = env_settings()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    level = (args.log_level or env.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # STEP 1: resolve the config
    overrides = [f"kind={args.kind}", *args.override]
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = load_config(args.config, overrides)
        experiments = expand_sweep(config)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.dry_run:
        print(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False))
        return EXIT_OK

    base = args.out or (Path(env.out) if env.out else Path(config.output.dir))
    threads = args.threads or env.threads

    # STEP 2: run, one experiment per worker
    try:
        if threads > 1 and len(experiments) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(run_experiment, c, base) for c in experiments]
                results = [f.result() for f in futures]
        else:
            results = [run_experiment(c, base) for c in experiments]
    except HypothesisViolation as e:
        print(f"hypothesis violation: {e}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure ({type(e).__name__}): {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info("finished %d experiment(s) under %s", len(results), base)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
