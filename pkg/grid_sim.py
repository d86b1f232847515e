# grid_sim.py

"""
Finite-volume simulator for peak solutions in logarithmic variables.

Variables are x = log2(xi) and g(x, t) = xi f(xi, t). The measure lives on the
intervals I_n = (n - delta0, n + delta0); each interval carries G cells whose
masses approximate the integral of g over the cell. The weak form is

    d/dt int g phi = (ln2/2) iint K g g [phi(u) - phi(y) - phi(z)]
                     - 1/4 int gamma(2^(y+1)) g(y+1) [phi(y+1) - 2 phi(y)]

with u = log2(2^y + 2^z). Coagulation of two cells of I_n lands in I_{n+1}
and is remapped onto the two bracketing cells so that number and xi-mass are
both deposited exactly. Fragmentation moves a cell of I_n to the same cell of
I_{n-1}, doubling its number.

The lowest window peak does not fragment (reflecting left edge), the kernels are
truncated above N, so no mass ever leaves the window.
"""

import functools
import logging
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse
from scipy.linalg import expm

from errors import ConfigError, IntegrationError, StepRejected
from kernels import LN2, K_at, KernelModel, log_gamma
from moment_ode import ABSENT_MASS, MomentState
from stationary import IndexWindow, StationaryProfile

logger = logging.getLogger(__name__)


class SimConfig(BaseModel):
    """Grid and stepping parameters of one simulation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: KernelModel = KernelModel()
    window: IndexWindow = IndexWindow(n_lo=-10, n_hi=10)
    delta0: float = Field(0.05, gt=0.0)
    cells_per_interval: int = 64
    n_trunc: int | None = None
    dt_safety: float = Field(0.2, gt=0.0, le=1.0)
    # shift that must sit exactly on a cell center, so combs at n + rho_align stay on-grid
    rho_align: float = 0.0
    scheme: Literal["rk4", "strang"] = "rk4"
    freeze_threshold: float = ABSENT_MASS

    @model_validator(mode="after")
    def _check(self):
        if not self.delta0 < 0.5 * (1.0 - self.kernel.epsilon0):
            raise ValueError(
                f"delta0={self.delta0} must be below (1 - epsilon0)/2 = {0.5 * (1 - self.kernel.epsilon0):.6g}")
        if self.cells_per_interval < 8 or self.cells_per_interval % 2:
            raise ValueError("cells_per_interval must be an even integer >= 8")
        if self.n_trunc is not None and not self.window.n_lo < self.n_trunc <= self.window.n_hi:
            raise ValueError(f"n_trunc={self.n_trunc} outside window")
        if abs(self.rho_align) > self.delta0:
            raise ValueError("rho_align must lie in [-delta0, delta0]")
        return self

    @property
    def N(self) -> int:
        return self.window.n_hi if self.n_trunc is None else self.n_trunc

    @property
    def h(self) -> float:
        return 2.0 * self.delta0 / self.cells_per_interval

    @property
    def offsets(self) -> np.ndarray:
        """Cell centers relative to n; one of them equals rho_align."""
        G, h, d = self.cells_per_interval, self.h, self.delta0
        j_star = min(int(math.floor((self.rho_align + d) / h)), G - 1)
        shift = self.rho_align - (-d + (j_star + 0.5) * h)
        out = -d + (np.arange(G) + 0.5) * h + shift
        out[j_star] = self.rho_align
        return out


@dataclass(frozen=True)
class GridOperator:
    """Time-independent tables of one SimConfig."""

    xs: np.ndarray          # (P, G) cell centers
    frag_rate: np.ndarray   # (P, G) loss rate gamma/4
    kmat: np.ndarray        # (P, G, G) K between cells of the same peak
    deposit: sparse.csr_matrix  # (G, G*G) pair -> cell of the next peak


@functools.lru_cache(maxsize=32)
def grid_operator(config: SimConfig) -> GridOperator:
    ns = config.window.indices
    o = config.offsets
    G = o.size
    xs = ns[:, None] + o[None, :]

    # FRAGMENTATION: gamma_N vanishes above N + 1/2, the lowest peak is reflecting
    frag_rate = np.exp(np.asarray(log_gamma(config.kernel, xs))) / 4.0
    frag_rate[0] = 0.0
    frag_rate[ns > config.N] = 0.0

    # COAGULATION: K_N vanishes for y >= N - 1/2
    kmat = np.asarray(K_at(config.kernel, xs[:, :, None], xs[:, None, :]))
    kmat[ns >= config.N] = 0.0

    # REMAP: offset of u inside I_{n+1} does not depend on n
    u = np.logaddexp2(o[:, None], o[None, :]) - 1.0
    a = np.clip(np.searchsorted(o, u, side="right") - 1, 0, G - 2)
    b = a + 1
    w_b = (np.exp2(u) - np.exp2(o[a])) / (np.exp2(o[b]) - np.exp2(o[a]))
    w_a = 1.0 - w_b
    cols = np.arange(G * G)
    deposit = sparse.csr_matrix(
        (np.concatenate([w_a.ravel(), w_b.ravel()]),
         (np.concatenate([a.ravel(), b.ravel()]), np.concatenate([cols, cols]))),
        shape=(G, G * G))
    return GridOperator(xs, frag_rate, kmat, deposit)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    config: SimConfig
    masses: np.ndarray
    time: float = 0.0

    @property
    def operator(self) -> GridOperator:
        return grid_operator(self.config)

    @property
    def xs(self) -> np.ndarray:
        return self.operator.xs

    def peak_masses(self) -> np.ndarray:
        return self.masses.sum(axis=1)


######################################################################################
############################ INITIAL DATA ############################################
######################################################################################

def _blob_weights(offsets, center, width, delta0, tol=1e-12):
    if width == 0.0:
        hit = np.flatnonzero(np.abs(offsets - center) <= tol)
        w = np.zeros_like(offsets)
        if hit.size:
            w[hit[0]] = 1.0
            return w
        if not offsets[0] <= center <= offsets[-1]:
            raise ConfigError(f"peak center {center} outside the cell range")
        a = np.searchsorted(offsets, center) - 1
        frac = (center - offsets[a]) / (offsets[a + 1] - offsets[a])
        w[a], w[a + 1] = 1.0 - frac, frac
        return w
    if abs(center) + 3.0 * width > delta0:
        raise ConfigError(f"blob of width {width} at {center} leaves the interval")
    near = np.abs(offsets - center) <= 3.0 * width
    w = np.where(near, np.exp(-0.5 * ((offsets - center) / width) ** 2), 0.0)
    if w.sum() == 0.0:
        w[np.argmin(np.abs(offsets - center))] = 1.0
    return w / w.sum()


def init_from_profile(profile: StationaryProfile, config: SimConfig, blob_width: float = 0.0,
                      perturbation=None) -> GridMeasure:
    """
    Places a blob of mass m_bar_n(A, p) (1 + 2^n y_n) around n + p_n in each interval.

    Args:
        profile: stationary profile on the simulation window
        config: grid configuration
        blob_width: standard deviation of the discrete Gaussian blob, 0 for a Dirac
        perturbation: factors 1 + 2^n y_n per peak, all positive

    Returns:
        GridMeasure at t = 0, zero above N
    """
    if profile.window != config.window:
        raise ConfigError("profile window differs from the simulation window")
    if not 0.0 <= blob_width < config.delta0 / 2.0:
        raise ConfigError(f"blob_width must be in [0, delta0/2), got {blob_width}")
    factors = np.ones(config.window.size) if perturbation is None else np.asarray(perturbation, float)
    if factors.shape != (config.window.size,) or np.any(factors <= 0.0):
        raise ConfigError("perturbation factors must be positive, one per peak")

    peak = np.exp(profile.log_m_bar) * factors
    peak[config.window.indices > config.N] = 0.0
    o = config.offsets
    masses = np.zeros((config.window.size, o.size))
    for i, center in enumerate(profile.shift.p):
        if peak[i] > 0.0:
            masses[i] = peak[i] * _blob_weights(o, center, blob_width, config.delta0)
    return GridMeasure(config, masses, 0.0)


######################################################################################
############################ RIGHT-HAND SIDES ########################################
######################################################################################

def _active(config: SimConfig, masses):
    return masses.sum(axis=1) >= config.freeze_threshold


def coagulation_rhs(config: SimConfig, masses: np.ndarray) -> np.ndarray:
    op = grid_operator(config)
    m = np.where(_active(config, masses)[:, None], masses, 0.0)
    pair = 0.5 * LN2 * op.kmat * m[:, :, None] * m[:, None, :]
    out = -2.0 * pair.sum(axis=2)
    gained = (op.deposit @ pair.reshape(m.shape[0], -1).T).T
    out[1:] += gained[:-1]
    return out


def fragmentation_rhs(config: SimConfig, masses: np.ndarray) -> np.ndarray:
    flux = grid_operator(config).frag_rate * masses
    out = -flux
    out[:-1] += 2.0 * flux[1:]
    return out


def total_rhs(config: SimConfig, masses: np.ndarray) -> np.ndarray:
    return coagulation_rhs(config, masses) + fragmentation_rhs(config, masses)


def outflow_rate(state: GridMeasure) -> float:
    """Largest per-cell outflow rate gamma/4 + coagulation loss over cells carrying mass."""
    op = state.operator
    m = np.where(_active(state.config, state.masses)[:, None], state.masses, 0.0)
    coag = LN2 * np.einsum("njk,nk->nj", op.kmat, m)
    rate = op.frag_rate + coag
    occupied = state.masses > 0.0
    return float(rate[occupied].max()) if occupied.any() else 0.0


def stable_dt(state: GridMeasure) -> float:
    """CFL step rounded down to a power of two; the propagator cache is keyed on dt."""
    rate = outflow_rate(state)
    if rate == 0.0:
        return math.inf
    return 2.0 ** math.floor(math.log2(state.config.dt_safety / rate))


######################################################################################
############################ SUBSTEPS ################################################
######################################################################################

@functools.lru_cache(maxsize=32)
def _cascade_propagators(config: SimConfig, dt: float) -> np.ndarray:
    """Exact propagators of the fragmentation cascade, one (P, P) matrix per cell offset."""
    rate = grid_operator(config).frag_rate
    P, G = rate.shape
    out = np.empty((G, P, P))
    for j in range(G):
        B = np.diag(-rate[:, j])
        B[np.arange(P - 1), np.arange(1, P)] = 2.0 * rate[1:, j]
        out[j] = expm(B * dt)
    return out


def fragmentation_substep(state: GridMeasure, dt: float) -> GridMeasure:
    """Exact exponential update of the linear fragmentation cascade over dt."""
    props = _cascade_propagators(state.config, float(dt))
    new = np.einsum("jpq,qj->pj", props, state.masses)
    return replace(state, masses=np.maximum(new, 0.0), time=state.time + dt)


def coagulation_substep(state: GridMeasure, dt: float) -> GridMeasure:
    """
    Explicit two-stage (Heun) coagulation update.

    Raises:
        StepRejected when a cell would turn negative; the caller shrinks dt.
    """
    m0 = state.masses
    k1 = coagulation_rhs(state.config, m0)
    stage = m0 + dt * k1
    if np.any(stage < 0.0):
        raise StepRejected(f"coagulation stage negative for dt={dt:.3g}")
    new = 0.5 * (m0 + stage + dt * coagulation_rhs(state.config, stage))
    if np.any(new < 0.0):
        raise StepRejected(f"coagulation step negative for dt={dt:.3g}")
    return replace(state, masses=new, time=state.time + dt)


def _rk4_step(state: GridMeasure, dt: float) -> GridMeasure:
    cfg, m = state.config, state.masses
    k1 = total_rhs(cfg, m)
    k2 = total_rhs(cfg, m + 0.5 * dt * k1)
    k3 = total_rhs(cfg, m + 0.5 * dt * k2)
    k4 = total_rhs(cfg, m + dt * k3)
    new = m + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if np.any(new < 0.0):
        raise StepRejected(f"negative cell mass for dt={dt:.3g}")
    return replace(state, masses=new, time=state.time + dt)


def step(state: GridMeasure, dt: float) -> GridMeasure:
    """One time step with the configured scheme (unsplit RK4 or Strang splitting)."""
    if state.config.scheme == "strang":
        half = fragmentation_substep(state, 0.5 * dt)
        full = coagulation_substep(half, dt)
        out = fragmentation_substep(full, 0.5 * dt)
        return replace(out, time=state.time + dt)
    return _rk4_step(state, dt)


def evolve(state: GridMeasure, t_end: float, sample_times=None, max_halvings: int = 30):
    """
    Advances to t_end with adaptive dt, stopping exactly at every sample time.

    Returns:
        (final state, list of snapshots at the sample times)
    """
    samples = sorted(t for t in (sample_times or []) if state.time <= t <= t_end)
    snapshots = []
    steps = rejected = 0
    while samples and samples[0] <= state.time:
        snapshots.append(state)
        samples.pop(0)
    while state.time < t_end:
        target = samples[0] if samples else t_end
        dt = min(stable_dt(state), target - state.time)
        for _ in range(max_halvings):
            try:
                new = step(state, dt)
                break
            except StepRejected:
                rejected += 1
                dt *= 0.5
        else:
            raise IntegrationError(f"step size collapsed at t={state.time:.6g}")
        # landing on the sample time exactly keeps snapshot times reproducible
        if target - new.time < 1e-12 * max(1.0, target):
            new = replace(new, time=target)
        state = new
        steps += 1
        if steps % 5000 == 0:
            logger.debug("grid t=%.5g after %d steps (%d rejected)", state.time, steps, rejected)
        while samples and samples[0] <= state.time:
            snapshots.append(state)
            samples.pop(0)
    logger.info("grid run reached t=%.5g in %d steps, %d rejected", state.time, steps, rejected)
    return state, snapshots


######################################################################################
############################ DIAGNOSTICS #############################################
######################################################################################

def xi_mass(state: GridMeasure) -> float:
    return float(np.sum(np.exp2(state.xs) * state.masses))


def support_leakage(state: GridMeasure) -> float:
    """xi-mass carried by cells whose centers lie outside the closed intervals n + [-delta0, delta0]."""
    outside = np.abs(state.config.offsets) > state.config.delta0 + 1e-12
    return float(np.sum(np.exp2(state.xs[:, outside]) * state.masses[:, outside]))


def left_edge_flux(state: GridMeasure) -> float:
    """Fragmentation flux out of the lowest peak that the reflecting edge suppresses."""
    x = state.xs[0]
    rate = np.exp(np.asarray(log_gamma(state.config.kernel, x))) / 4.0
    return float(np.sum(rate * state.masses[0]))


def extract_moments(state: GridMeasure) -> MomentState:
    """Per-peak mass, centroid offset and variance; peaks below 1e-250 are flagged absent."""
    cfg = state.config
    o = cfg.offsets
    m = state.peak_masses()
    absent = m < ABSENT_MASS
    safe = np.where(absent, 1.0, m)
    p = np.where(absent, 0.0, state.masses @ o / safe)
    q = np.where(absent, 0.0, np.einsum("nj,nj->n", state.masses, (o[None, :] - p[:, None]) ** 2) / safe)
    return MomentState(cfg.window, state.time, np.where(absent, 0.0, m), p, np.maximum(q, 0.0),
                       delta0=cfg.delta0, N=cfg.N, absent=absent)


def snapshot_frame(state: GridMeasure) -> pd.DataFrame:
    P, G = state.masses.shape
    return pd.DataFrame({
        "t": state.time,
        "n": np.repeat(state.config.window.indices, G),
        "j": np.tile(np.arange(G), P),
        "x_center": state.xs.ravel(),
        "mass": state.masses.ravel(),
    })
