# stationary.py

"""
Stationary peak profiles.

A stationary Dirac comb puts mass a_n at x = n + rho with a_{n+1} = zeta_n a_n**2.
The shifted family m_bar_n(A, p) generalises this to a shift sequence p_n and is
written through the reduced variables mu_bar_n = zeta_n m_bar_n / 2:

    mu_bar_n = exp(-A 2^n) exp(-2^n sum_{j>n} 2^-j ln theta_{j-1}),
    theta_n  = 2 zeta_{n+1} / zeta_n.

Everything is carried in log space. Profiles are immutable after construction.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import mpmath
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import brentq
from scipy.special import logsumexp

from errors import ConfigError, ConstructionError, RangeError, WindowTooSmall
from kernels import LN2, KernelModel, gamma_elasticity, k_elasticity, log_gamma, log_k

logger = logging.getLogger(__name__)

# Largest |n + p_n| we accept before 2^(n+p_n) leaves the double range
EXPONENT_LIMIT = 1000.0
UNDERFLOW_LOG = math.log(1e-300)
TINY = np.finfo(float).tiny
MASS_TAIL_TOL = 1e-12


class IndexWindow(BaseModel):
    """Finite window n_lo..n_hi (inclusive) of the peak index n."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_lo: int = -20
    n_hi: int = 12

    @model_validator(mode="after")
    def _check(self):
        if not self.n_lo < 0 < self.n_hi:
            raise ValueError(f"window must satisfy n_lo < 0 < n_hi, got [{self.n_lo}, {self.n_hi}]")
        if self.n_hi - self.n_lo < 8:
            raise ValueError("window must contain at least nine peaks")
        return self

    @property
    def size(self) -> int:
        return self.n_hi - self.n_lo + 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.n_lo, self.n_hi + 1)

    def position(self, n) -> int:
        """Array position of index n."""
        if not self.n_lo <= n <= self.n_hi:
            raise IndexError(f"n={n} outside window [{self.n_lo}, {self.n_hi}]")
        return int(n - self.n_lo)


@dataclass(frozen=True, eq=False)
class ShiftSequence:
    """Per-peak shifts p_n with constant extensions below and above the window."""

    window: IndexWindow
    p: np.ndarray
    p_inf: float
    p_lo_ext: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (self.window.size,):
            raise ConfigError(f"shift needs {self.window.size} entries, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ConfigError("shift values must be finite")
        object.__setattr__(self, "p", p)

    @classmethod
    def constant(cls, window: IndexWindow, rho: float) -> "ShiftSequence":
        return cls(window, np.full(window.size, float(rho)), float(rho), float(rho))

    @classmethod
    def from_values(cls, window: IndexWindow, p, p_inf=None, p_lo_ext=None) -> "ShiftSequence":
        p = np.asarray(p, dtype=float)
        return cls(window, p,
                   float(p[-1]) if p_inf is None else float(p_inf),
                   float(p[0]) if p_lo_ext is None else float(p_lo_ext))

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.p == self.p[0]) and self.p_inf == self.p[0] == self.p_lo_ext)

    @property
    def rho(self) -> float:
        if not self.is_constant:
            raise ConfigError("shift is not constant")
        return float(self.p[0])

    def at(self, n):
        """p_n for any integer n (scalar or array), using the constant extensions."""
        n = np.asarray(n)
        pos = np.clip(n - self.window.n_lo, 0, self.window.size - 1)
        vals = np.where(n < self.window.n_lo, self.p_lo_ext,
                        np.where(n > self.window.n_hi, self.p_inf, self.p[pos]))
        return float(vals) if vals.ndim == 0 else vals

    def with_entry(self, k: int, value: float) -> "ShiftSequence":
        p = self.p.copy()
        p[self.window.position(k)] = value
        return replace(self, p=p)

    def shifted(self, c: float) -> "ShiftSequence":
        return ShiftSequence(self.window, self.p + c, self.p_inf + c, self.p_lo_ext + c)

    def check(self, delta0: float, epsilon0: float):
        """Raises ConfigError unless |p_n| <= delta0 < (1 - epsilon0)/2."""
        if not delta0 < 0.5 * (1.0 - epsilon0):
            raise ConfigError(f"delta0={delta0} must be below (1 - epsilon0)/2 = {0.5 * (1 - epsilon0):.6g}")
        worst = max(np.abs(self.p).max(), abs(self.p_inf), abs(self.p_lo_ext))
        if worst > delta0:
            raise ConfigError(f"shift magnitude {worst:.6g} exceeds delta0={delta0}")


######################################################################################
############################ RECURRENCE COEFFICIENTS #################################
######################################################################################

def log_zeta(model: KernelModel, n, p: ShiftSequence):
    """ln zeta_n(p) = ln ln2 - (n+p_n) ln2 + ln k(2^(n+p_n)) - ln gamma(2^(n+1+p_{n+1}))."""
    n = np.asarray(n)
    x = n + p.at(n)
    x1 = n + 1 + p.at(n + 1)
    if np.any(np.abs(x1) > EXPONENT_LIMIT) or np.any(np.abs(x) > EXPONENT_LIMIT):
        raise RangeError(f"peak index out of exponent range: n={n}")
    out = math.log(LN2) - x * LN2 + np.asarray(log_k(model, x)) - np.asarray(log_gamma(model, x1))
    return float(out) if np.ndim(out) == 0 else out


def zeta(model: KernelModel, n, p: ShiftSequence):
    out = np.exp(log_zeta(model, n, p))
    return float(out) if np.ndim(out) == 0 else out


def log_theta(model: KernelModel, n, p: ShiftSequence):
    n = np.asarray(n)
    out = LN2 + np.asarray(log_zeta(model, n + 1, p)) - np.asarray(log_zeta(model, n, p))
    return float(out) if np.ndim(out) == 0 else out


def theta(model: KernelModel, n, p: ShiftSequence):
    out = np.exp(log_theta(model, n, p))
    return float(out) if np.ndim(out) == 0 else out


def series_tail(model: KernelModel, p: ShiftSequence, n: int, tail_terms: int = 64) -> float:
    """
    S_n = sum_{j>n} 2^-j ln theta_{j-1}(p).

    Terms up to n_hi + tail_terms are summed exactly, the rest uses the
    large-n limit of ln theta.
    """
    top = max(n, p.window.n_hi) + tail_terms
    js = np.arange(n, top + 1)
    lt = np.asarray(log_theta(model, js, p))
    if not np.all(np.isfinite(lt)):
        raise ConstructionError("ln theta not finite, series does not converge")
    # summed from the top so that the small terms go first
    terms = np.exp2(-(js + 1.0)) * lt
    return float(np.sum(terms[::-1]) + 2.0 ** (-(top + 1.0)) * model.log_theta_limit)


@dataclass(frozen=True, eq=False)
class StationaryProfile:
    """
    Coefficients m_bar_n(A, p) and mu_bar_n on the shift's window.

    Arrays are indexed by window position; `log_m_bar` is exact, `m_bar` is
    flushed to the smallest positive double where it underflows and flagged in
    `underflow`.
    """

    model: KernelModel
    A: float
    shift: ShiftSequence
    tail_terms: int
    log_zeta: np.ndarray
    log_mu_bar: np.ndarray
    log_m_bar: np.ndarray
    underflow: np.ndarray = field(repr=False)

    @property
    def window(self) -> IndexWindow:
        return self.shift.window

    @property
    def indices(self) -> np.ndarray:
        return self.window.indices

    @property
    def m_bar(self) -> np.ndarray:
        return np.where(self.underflow, TINY, np.exp(np.maximum(self.log_m_bar, UNDERFLOW_LOG)))

    @property
    def mu_bar(self) -> np.ndarray:
        return np.exp(self.log_mu_bar)

    @property
    def zeta(self) -> np.ndarray:
        return np.exp(self.log_zeta)

    def value(self, n: int) -> float:
        return float(self.m_bar[self.window.position(n)])

    def log_value(self, n: int) -> float:
        return float(self.log_m_bar[self.window.position(n)])

    def log_mass_per_peak(self) -> np.ndarray:
        """ln(2^(n+p_n) m_bar_n)."""
        return (self.indices + self.shift.p) * LN2 + self.log_m_bar


def m_bar(model: KernelModel, A: float, p: ShiftSequence, tail_terms: int = 64) -> StationaryProfile:
    """
    Builds the shifted stationary profile m_bar_n(A, p) = 2 mu_bar_n / zeta_n.

    mu_bar at the top of the window comes from the series; below it the exact
    recursion ln mu_bar_n = (ln mu_bar_{n+1} - ln theta_n)/2 is run downward,
    which halves rounding errors at every step.
    """
    if not (A > 0 and math.isfinite(A)):
        raise RangeError(f"A must be positive and finite, got {A}")
    window = p.window
    ns = window.indices
    lz = np.asarray(log_zeta(model, np.arange(window.n_lo, window.n_hi + 2), p))
    lt = LN2 + lz[1:] - lz[:-1]

    # STEP 1: top of the window straight from the series
    log_mu = np.empty(window.size)
    log_mu[-1] = -(2.0 ** window.n_hi) * (A + series_tail(model, p, window.n_hi, tail_terms))

    # STEP 2: exact recursion downward
    for i in range(window.size - 2, -1, -1):
        log_mu[i] = 0.5 * (log_mu[i + 1] - lt[i])

    if not np.all(np.isfinite(log_mu)):
        raise ConstructionError("mu_bar not finite")
    log_mb = LN2 + log_mu - lz[:-1]
    underflow = log_mb < UNDERFLOW_LOG
    if underflow.any():
        logger.debug("m_bar underflows on %d of %d peaks (A=%g)", underflow.sum(), ns.size, A)
    return StationaryProfile(model, float(A), p, tail_terms, lz[:-1], log_mu, log_mb, underflow)


def mu_bar(model: KernelModel, A: float, p: ShiftSequence, n: int) -> float:
    return float(m_bar(model, A, p).mu_bar[p.window.position(n)])


def recurrence_residual(profile: StationaryProfile) -> np.ndarray:
    """|m_bar_{n+1} - zeta_n m_bar_n^2| / m_bar_{n+1} for n_lo <= n < n_hi, from the logs."""
    lm = profile.log_m_bar
    return np.abs(np.expm1(profile.log_zeta[:-1] + 2.0 * lm[:-1] - lm[1:]))


def mu_recurrence_residual(profile: StationaryProfile) -> np.ndarray:
    """|mu_bar_{n+1} - theta_n mu_bar_n^2| / mu_bar_{n+1}."""
    lt = LN2 + profile.log_zeta[1:] - profile.log_zeta[:-1]
    lm = profile.log_mu_bar
    return np.abs(np.expm1(lt + 2.0 * lm[:-1] - lm[1:]))


# ------ DERIVATIVES ------ #

def d_mbar_dA(profile: StationaryProfile, n: int) -> float:
    """dm_bar_n/dA = -2^n m_bar_n."""
    return -(2.0 ** n) * profile.value(n)


def log_derivative_pk(model: KernelModel, profile: StationaryProfile, n: int, k: int) -> float:
    """(1/m_bar_n) dm_bar_n/dp_k."""
    if k < n:
        return 0.0
    x_k = k + profile.shift.at(k)
    out = -(2.0 ** (n - k - 1)) * LN2 * (k_elasticity(model, x_k) - 1.0)
    if k > n:
        out += 2.0 ** (n - k) * LN2 * gamma_elasticity(model, x_k)
    return float(out)


def d_mbar_dpk(model: KernelModel, profile: StationaryProfile, n: int, k: int) -> float:
    """dm_bar_n/dp_k: zero for k < n, k-elasticity term only for k = n, both terms for k > n."""
    return log_derivative_pk(model, profile, n, k) * profile.value(n)


######################################################################################
############################ MASS AND ITS INVERSE ####################################
######################################################################################

def mass_window(A: float, n_lo: int = -40) -> IndexWindow:
    """Window wide enough that both mass tails are negligible for decay parameter A."""
    n_hi = max(8, int(math.ceil(math.log2(800.0 / A))) + 2)
    return IndexWindow(n_lo=n_lo, n_hi=n_hi)


def mass_tails(profile: StationaryProfile):
    """Returns (ln window mass, left tail estimate, tail uncertainty) for a constant shift."""
    rho = profile.shift.rho
    lmp = profile.log_mass_per_peak()
    log_window = float(logsumexp(lmp))
    # LEFT: a_n ~ 2^n, so sum_{n<n_lo} 2^(n+rho) a_n ~ 2^(n_lo+rho) a_{n_lo} / 3
    left = math.exp(lmp[0]) / 3.0
    slope_defect = abs(math.expm1(profile.log_m_bar[1] - profile.log_m_bar[0] - LN2))
    # RIGHT: double-exponential decay past n_hi, bounded by twice the next term
    n_top = profile.window.n_hi
    log_next = profile.log_zeta[-1] + 2.0 * profile.log_m_bar[-1]
    right = 2.0 * math.exp(min((n_top + 1 + rho) * LN2 + log_next, 700.0))
    return log_window, left, left * slope_defect + right


def total_mass(profile: StationaryProfile) -> float:
    """
    M(A, rho) = sum_n 2^(n+rho) a_n(A, rho) for a constant-shift profile.

    Raises:
        WindowTooSmall when the uncertain part of the tails exceeds 1e-12 relative.
    """
    if not profile.shift.is_constant:
        raise ConfigError("total_mass needs a constant shift")
    log_window, left, uncertain = mass_tails(profile)
    mass = math.exp(log_window) + left
    if uncertain > MASS_TAIL_TOL * mass:
        raise WindowTooSmall(
            f"mass tails {uncertain:.3g} exceed {MASS_TAIL_TOL:g} relative on {profile.window}")
    return mass


def mass_of(model: KernelModel, A: float, rho: float, tail_terms: int = 64) -> float:
    return total_mass(m_bar(model, A, ShiftSequence.constant(mass_window(A), rho), tail_terms))


def solve_A_for_mass(model: KernelModel, M: float, rho: float, bracket=(1e-8, 1e8)) -> float:
    """
    Inverts the strictly decreasing map A -> M(A, rho).

    Root finding runs on ln A inside the bracket; the result is accurate to
    about 1e-14 relative in A.

    Raises:
        RangeError when M is not attained for A inside the bracket.
    """
    if not (M > 0 and math.isfinite(M)):
        raise RangeError(f"mass must be positive, got {M}")
    if not abs(rho) < 1.0:
        raise RangeError(f"|rho| must be below 1, got {rho}")
    log_M = math.log(M)

    def gap(log_A):
        return math.log(mass_of(model, math.exp(log_A), rho)) - log_M

    lo, hi = math.log(bracket[0]), math.log(bracket[1])
    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo > 0.0 > g_hi):
        raise RangeError(f"mass {M} not attained for A in {bracket}")
    root = brentq(gap, lo, hi, xtol=1e-14, rtol=4.0 * np.finfo(float).eps, maxiter=500)
    A = math.exp(root)
    logger.debug("A_M=%.15g for M=%g rho=%g", A, M, rho)
    return A


######################################################################################
############################ REPORTS #################################################
######################################################################################

@dataclass
class AsymptoteReport:
    a_minus_inf: float
    left_ratio: float
    log_a_inf: float
    right_values: list
    right_cauchy: float
    right_gap: float

    @property
    def left_ok(self) -> bool:
        return 0.99 <= self.left_ratio <= 1.01

    @property
    def right_ok(self) -> bool:
        return self.right_cauchy < 1e-3


def asymptote_report(model: KernelModel, profile: StationaryProfile) -> AsymptoteReport:
    """Left and right tail behaviour of a constant-shift profile."""
    rho = profile.shift.rho
    A = profile.A
    a_minus = model.gamma0 * 2.0 ** (rho + 1.0) / (model.k0 * LN2)
    n_lo = profile.window.n_lo
    left_ratio = math.exp(profile.log_m_bar[0] - n_lo * LN2) / a_minus

    log_a_inf = -math.log(LN2) + model.beta * LN2 + (model.beta - model.alpha) * (rho + 1.0) * LN2
    n_hi = profile.window.n_hi
    right = []
    for n in range(n_hi - 3, n_hi + 1):
        right.append(profile.log_value(n) + A * 2.0 ** n - (model.beta - model.alpha) * n * LN2)
    cauchy = max(right) - min(right)
    return AsymptoteReport(a_minus, left_ratio, log_a_inf, right, cauchy, abs(right[-1] - log_a_inf))


def derivative_check(model: KernelModel, profile: StationaryProfile, rng: np.random.Generator,
                     samples: int = 100, n_range=(-10, 5), k_span: int = 8, h: float = 1e-5) -> dict:
    """
    Compares the analytic derivatives with central finite differences.

    Differences are taken on ln m_bar; errors are relative to the natural
    scale 2^(n-k) of the p-derivative.
    """
    window = profile.window
    lo = max(n_range[0], window.n_lo)
    hi = min(n_range[1], window.n_hi - 1)
    hA = 1e-6 * profile.A
    up = m_bar(model, profile.A + hA, profile.shift, profile.tail_terms)
    down = m_bar(model, profile.A - hA, profile.shift, profile.tail_terms)
    fd_A = (up.log_m_bar - down.log_m_bar) / (2.0 * hA)
    exact_A = -np.exp2(window.indices.astype(float))
    mask = (window.indices >= lo) & (window.indices <= hi)
    err_A = float(np.max(np.abs(fd_A[mask] / exact_A[mask] - 1.0)))

    err_p = 0.0
    for _ in range(samples):
        n = int(rng.integers(lo, hi + 1))
        k = int(rng.integers(n, min(n + k_span, window.n_hi) + 1))
        pk = profile.shift.at(k)
        plus = m_bar(model, profile.A, profile.shift.with_entry(k, pk + h), profile.tail_terms)
        minus = m_bar(model, profile.A, profile.shift.with_entry(k, pk - h), profile.tail_terms)
        i = window.position(n)
        fd = (plus.log_m_bar[i] - minus.log_m_bar[i]) / (2.0 * h)
        exact = log_derivative_pk(model, profile, n, k)
        err_p = max(err_p, abs(fd - exact) / 2.0 ** (n - k))
    return {"dA_max_rel_err": err_A, "dp_max_rel_err": err_p, "samples": samples}


def profile_frame(profile: StationaryProfile) -> pd.DataFrame:
    """CSV-ready table of a profile."""
    residual = np.append(recurrence_residual(profile), np.nan)
    return pd.DataFrame({
        "n": profile.indices,
        "p": profile.shift.p,
        "m_bar": profile.m_bar,
        "log_m_bar": profile.log_m_bar,
        "mu_bar": profile.mu_bar,
        "mass_per_peak": np.exp(np.maximum(profile.log_mass_per_peak(), UNDERFLOW_LOG)),
        "residual": residual,
        "underflow": profile.underflow,
    })


def mu_bar_series_mp(model: KernelModel, A: float, rho: float, n: int, terms: int = 60, dps: int = 50):
    """Extended-precision mu_bar_n for a constant shift, summing `terms` series terms."""
    with mpmath.workdps(dps):
        two = mpmath.mpf(2)
        ln2 = mpmath.log(two)

        def k(xi):
            return mpmath.mpf(model.k0) if model.flat else model.k0 + xi ** (model.alpha + 1)

        def g(xi):
            return mpmath.mpf(model.gamma0) if model.flat else model.gamma0 + xi ** model.beta

        def z(j):
            xi = two ** (j + rho)
            return ln2 / xi * k(xi) / g(2 * xi)

        total = mpmath.mpf(0)
        for j in range(n + 1, n + terms + 1):
            total += two ** (-j) * mpmath.log(2 * z(j) / z(j - 1))
        return mpmath.exp(-A * two ** n - two ** n * total)
