# linear.py

"""
Linearised peak-mass dynamics.

The operator is

    L_n(y; t) = gamma(2^(n+p_n(t)))/4 * (y_{n-1} - y_n - sigma_n(t) (y_n - y_{n+1}))

with a reflecting ghost y_{n_lo-1} = y_{n_lo} on the left and sigma = 0 at the
top of the window (or at the truncation index N, above which y stays zero).
Also here: weighted sup norms, the fundamental solution of the pure
fragmentation cascade, decay-envelope fitting, the discrete Poincare inequality
and the q-hat supersolution.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import mpmath
import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.linalg import eigh, expm
from scipy.sparse.linalg import expm_multiply

from errors import ConfigError, DomainError, IntegrationError
from kernels import KernelModel, log_gamma
from stationary import IndexWindow, ShiftSequence, StationaryProfile, m_bar

logger = logging.getLogger(__name__)


######################################################################################
############################ WEIGHTED SEQUENCES ######################################
######################################################################################

def weighted_norm(window: IndexWindow, values, theta: float) -> float:
    """sup_{n<=0} 2^n |y_n| + sup_{n>0} 2^(theta n) |y_n|."""
    ns = window.indices.astype(float)
    v = np.abs(np.asarray(values, dtype=float))
    left = ns <= 0
    lo = float(np.max(np.exp2(ns[left]) * v[left])) if left.any() else 0.0
    hi = float(np.max(np.exp2(theta * ns[~left]) * v[~left])) if (~left).any() else 0.0
    return lo + hi


@dataclass(frozen=True, eq=False)
class WeightedSeq:
    window: IndexWindow
    values: np.ndarray
    theta: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.window.size,):
            raise DomainError(f"sequence needs {self.window.size} entries, got {v.shape}")
        object.__setattr__(self, "values", v)

    def norm(self, theta: float | None = None) -> float:
        return weighted_norm(self.window, self.values, self.theta if theta is None else theta)

    def with_values(self, values) -> "WeightedSeq":
        return replace(self, values=np.asarray(values, dtype=float))


def discrete_derivative(y: WeightedSeq, side: Literal["plus", "minus"] = "plus") -> WeightedSeq:
    """D+_n = y_{n+1} - y_n (zero at the top), D-_n = y_n - y_{n-1} (zero at the reflecting bottom)."""
    v = y.values
    out = np.zeros_like(v)
    if side == "plus":
        out[:-1] = v[1:] - v[:-1]
    elif side == "minus":
        out[1:] = v[1:] - v[:-1]
    else:
        raise DomainError(f"side must be 'plus' or 'minus', got {side!r}")
    return y.with_values(out)


def distance_to_limit(y: WeightedSeq) -> WeightedSeq:
    """y minus its value at the top of the window, the finite-window stand-in for lim_{n->inf} y_n."""
    return y.with_values(y.values - y.values[-1])


######################################################################################
############################ COEFFICIENTS AND OPERATOR ###############################
######################################################################################

@dataclass(eq=False)
class SigmaCoeffs:
    """
    Coefficients of the linear operator.

    kind="constant": shift rho fixed, sigma_n = 4 zeta_{n,rho} a_n gamma(2^(n+1+rho))/gamma(2^(n+rho)).
    kind="time_dependent": sigma_n(t) = factor * mu_bar_n(A_M, p(t)) gamma(2^(n+1+p_{n+1}))/gamma(2^(n+p_n)),
    factor 8 for the mass perturbation, 4 for the centroid equation.
    """

    model: KernelModel
    window: IndexWindow
    A_M: float
    kind: Literal["constant", "time_dependent"] = "constant"
    rho: float = 0.0
    shift_path: Callable[[float], ShiftSequence] | None = None
    factor: float = 8.0
    N: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind == "time_dependent" and self.shift_path is None:
            raise DomainError("time-dependent coefficients need a shift path p(t)")
        if self.N is None:
            self.N = self.window.n_hi

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def shift(self, t: float) -> ShiftSequence:
        if self.is_constant:
            return ShiftSequence.constant(self.window, self.rho)
        return self.shift_path(t)

    def _evaluate(self, t):
        p = self.shift(t)
        ns = self.window.indices
        g_here = np.exp(np.asarray(log_gamma(self.model, ns + p.p)))
        g_up = np.exp(np.asarray(log_gamma(self.model, ns + 1 + p.at(ns + 1))))
        # 4 zeta_n m_bar_n = 8 mu_bar_n
        mu = m_bar(self.model, self.A_M, p).mu_bar
        sigma = self.factor * mu * g_up / g_here
        sigma[ns >= self.N] = 0.0
        return g_here / 4.0, sigma

    def rates_and_sigma(self, t: float = 0.0):
        if self.is_constant:
            if "const" not in self._cache:
                self._cache["const"] = self._evaluate(0.0)
            return self._cache["const"]
        return self._evaluate(t)

    def sigma(self, t: float = 0.0) -> np.ndarray:
        return self.rates_and_sigma(t)[1]

    def sigma_limit_defect(self, t: float = 0.0) -> float:
        """|sigma_{n_lo} - factor|, the distance from the n -> -inf limit."""
        return abs(float(self.sigma(t)[0]) - self.factor)


def operator_matrix(coeffs: SigmaCoeffs, t: float = 0.0) -> sparse.csr_matrix:
    """Tridiagonal matrix of L restricted to n <= N."""
    lam, sigma = coeffs.rates_and_sigma(t)
    k = coeffs.N - coeffs.window.n_lo + 1
    lam, sigma = lam[:k], sigma[:k]
    diag = -lam * (1.0 + sigma)
    lower = lam[1:].copy()
    upper = lam[:-1] * sigma[:-1]
    diag[0] += lam[0]  # reflecting ghost y_{n_lo-1} = y_{n_lo}
    return sparse.diags([lower, diag, upper], [-1, 0, 1], shape=(k, k), format="csr")


def apply_L(model: KernelModel, coeffs: SigmaCoeffs, y: WeightedSeq, t: float = 0.0) -> WeightedSeq:
    """Componentwise L(y; t); zero above the truncation index."""
    k = coeffs.N - coeffs.window.n_lo + 1
    out = np.zeros_like(y.values)
    out[:k] = operator_matrix(coeffs, t) @ y.values[:k]
    return y.with_values(out)


def evolve_trace(model: KernelModel, coeffs: SigmaCoeffs, y0: WeightedSeq, times, tol: float = 1e-9):
    """
    Solutions of dy/dt = L(y; t) at the requested times (first time is the initial time).

    Returns:
        array of shape (len(times), window size)
    """
    times = np.asarray(times, dtype=float)
    k = coeffs.N - coeffs.window.n_lo + 1
    out = np.zeros((times.size, y0.values.size))
    if np.any(y0.values[k:] != 0.0):
        raise DomainError("initial data must vanish above the truncation index")
    start = y0.values[:k].copy()
    out[0, :k] = start

    if coeffs.is_constant:
        A = operator_matrix(coeffs).tocsc()
        current = start
        for i in range(1, times.size):
            current = expm_multiply(A * (times[i] - times[i - 1]), current)
            out[i, :k] = current
        return out

    sol = solve_ivp(lambda t, v: operator_matrix(coeffs, t) @ v, (times[0], times[-1]), start,
                    method="Radau", t_eval=times, rtol=tol, atol=tol * max(1.0, np.abs(start).max()),
                    jac=lambda t, v: operator_matrix(coeffs, t))
    if not sol.success:
        raise IntegrationError(sol.message)
    out[:, :k] = sol.y.T
    return out


def evolve_T(model: KernelModel, coeffs: SigmaCoeffs, y0: WeightedSeq, t0: float, t1: float,
             tol: float = 1e-9) -> WeightedSeq:
    """T(t1; t0) y0."""
    if t1 < t0:
        raise DomainError("t1 must not precede t0")
    if t1 == t0:
        return y0
    return y0.with_values(evolve_trace(model, coeffs, y0, [t0, t1], tol)[-1])


def decay_traces(model: KernelModel, coeffs: SigmaCoeffs, y0: WeightedSeq, times, theta_tilde: float):
    """(||D+ y(t)||_theta_tilde, ||y(t) - y_top(t)||_theta_tilde) along the evolution."""
    sols = evolve_trace(model, coeffs, y0, times)
    d_plus = []
    gap = []
    for row in sols:
        y = y0.with_values(row)
        d_plus.append(discrete_derivative(y).norm(theta_tilde))
        gap.append(distance_to_limit(y).norm(theta_tilde))
    return np.array(d_plus), np.array(gap)


def semigroup_gap(model: KernelModel, coeffs_a: SigmaCoeffs, coeffs_b: SigmaCoeffs, y0: WeightedSeq,
                  times, theta: float | None = None) -> np.ndarray:
    """
    ||T_a(t) y0 - T_b(t) y0|| on the indices of y0's window, e.g. a truncated operator
    against the untruncated one, or one window against a larger one.
    """
    sol_a = evolve_trace(model, coeffs_a, _embed(y0, coeffs_a.window), times)
    sol_b = evolve_trace(model, coeffs_b, _embed(y0, coeffs_b.window), times)
    rows_a = _restrict(sol_a, coeffs_a.window, y0.window)
    rows_b = _restrict(sol_b, coeffs_b.window, y0.window)
    return np.array([y0.with_values(a - b).norm(theta) for a, b in zip(rows_a, rows_b)])


def _embed(y: WeightedSeq, window: IndexWindow) -> WeightedSeq:
    if window == y.window:
        return y
    out = np.zeros(window.size)
    for n, v in zip(y.window.indices, y.values):
        if window.n_lo <= n <= window.n_hi:
            out[window.position(n)] = v
    # continue the data by its edge values outside the original window
    lo = y.window.position(y.window.n_lo)
    out[window.indices < y.window.n_lo] = y.values[lo]
    return WeightedSeq(window, out, y.theta)


def _restrict(rows: np.ndarray, window: IndexWindow, target: IndexWindow) -> np.ndarray:
    keep = (window.indices >= target.n_lo) & (window.indices <= target.n_hi)
    out = np.zeros((rows.shape[0], target.size))
    idx = window.indices[keep] - target.n_lo
    out[:, idx] = rows[:, keep]
    return out


######################################################################################
############################ FUNDAMENTAL SOLUTION ####################################
######################################################################################

def _psi_rates(beta, lo, hi):
    return [mpmath.mpf(2) ** (beta * m) / 4 for m in range(lo, hi + 1)]


def fundamental_psi(beta: float, ell: int, n: int, t):
    """
    Psi_n^(ell)(t) for dPsi_n/dt = (2^(beta n)/4)(Psi_{n-1} - Psi_n), Psi_n(0) = delta_{n,ell}.

    Partial-fraction sum of exponentials, evaluated in extended precision so the
    alternating coefficients do not cancel catastrophically.
    """
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0.0):
        raise DomainError("time must be nonnegative")
    if n < ell:
        return 0.0 if scalar else np.zeros_like(ts)
    with mpmath.workdps(30 + 2 * (n - ell)):
        lam = _psi_rates(beta, ell, n)
        head = mpmath.fprod(lam[1:])
        coeff = []
        for i, li in enumerate(lam):
            denom = mpmath.fprod(lam[m] - li for m in range(len(lam)) if m != i)
            coeff.append(head / denom)
        vals = [float(mpmath.fsum(c * mpmath.exp(-li * mpmath.mpf(tt)) for c, li in zip(coeff, lam)))
                for tt in ts]
    out = np.maximum(np.array(vals), 0.0)
    return float(out[0]) if scalar else out


def psi_limit(beta: float, ell: int, t: float, cutoff: float = 800.0) -> float:
    """Psi_inf^(ell)(t) = lim_{n->inf} Psi_n^(ell)(t) for t > 0."""
    if t <= 0.0:
        raise DomainError("the limit profile is evaluated for t > 0")
    with mpmath.workdps(40):
        lam_l = mpmath.mpf(2) ** (beta * ell) / 4
        top = ell
        while float(mpmath.mpf(2) ** (beta * top) / 4) * t < cutoff:
            top += 1
        lam = _psi_rates(beta, ell, top + 40)
        total = mpmath.mpf(0)
        for i in range(top - ell + 1):
            li = lam[i]
            denom = mpmath.fprod(1 - li / lam[m] for m in range(len(lam)) if m != i)
            total += (li / lam_l) * mpmath.exp(-li * t) / denom
        return float(total)


def psi_difference_constant(beta: float, ell: int, n_max: int, times) -> float:
    """max over n in [ell, n_max), t of |Psi_n - Psi_{n+1}| 2^(beta (n-ell)) e^(2^(beta ell) t / 4)."""
    times = np.asarray(times, dtype=float)
    lam_l = 2.0 ** (beta * ell) / 4.0
    worst = 0.0
    prev = fundamental_psi(beta, ell, ell, times)
    for n in range(ell, n_max):
        nxt = fundamental_psi(beta, ell, n + 1, times)
        worst = max(worst, float(np.max(np.abs(prev - nxt) * 2.0 ** (beta * (n - ell)) * np.exp(lam_l * times))))
        prev = nxt
    return worst


######################################################################################
############################ DECAY FITTING ###########################################
######################################################################################

@dataclass
class DecayFit:
    C: float
    a: float
    nu: float
    residual: float

    def envelope(self, t):
        t = np.asarray(t, dtype=float)
        return self.C * t ** (-self.a) * np.exp(-self.nu * t)

    def as_dict(self):
        return {"C": self.C, "a": self.a, "nu": self.nu, "residual": self.residual}


def fit_decay(times, values, t_burn: float = 0.5, fit_power: bool = True) -> DecayFit:
    """
    Least squares for ln v = ln C - a ln t - nu t over t >= t_burn.

    Args:
        times, values: the trace; values must be positive
        t_burn: samples before this time are ignored
        fit_power: when False the power a is fixed to 0

    Returns:
        DecayFit with the max log-deviation as residual
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = (t >= t_burn) & (t > 0.0)
    t, v = t[keep], v[keep]
    if t.size < 20:
        raise DomainError(f"need at least 20 samples after burn-in, got {t.size}")
    if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
        raise DomainError("decay traces must be positive and finite")
    cols = [np.ones_like(t), -np.log(t), -t] if fit_power else [np.ones_like(t), -t]
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, np.log(v), rcond=None)
    residual = float(np.max(np.abs(X @ coef - np.log(v))))
    if fit_power:
        return DecayFit(float(np.exp(coef[0])), float(coef[1]), float(coef[2]), residual)
    return DecayFit(float(np.exp(coef[0])), 0.0, float(coef[1]), residual)


######################################################################################
############################ POINCARE INEQUALITY #####################################
######################################################################################

def _poincare_weights(model: KernelModel, profile: StationaryProfile):
    ns = profile.indices
    log_mb = profile.log_m_bar
    w = np.exp(2.0 * ns * np.log(2.0) + log_mb)
    x_up = ns[:-1] + 1 + profile.shift.at(ns[:-1] + 1)
    g = np.exp(2.0 * ns[:-1] * np.log(2.0) + np.asarray(log_gamma(model, x_up)) + log_mb[1:])
    return w, g


def poincare_rayleigh(model: KernelModel, profile: StationaryProfile, y: WeightedSeq) -> float:
    """
    sum 2^(2n) m_bar_n (y_n - mean)^2 / sum 2^(2n) gamma(2^(n+1+p_{n+1})) m_bar_{n+1} (D+_n y)^2,
    with the m_bar-weighted mean; 0/0 is 0.
    """
    w, g = _poincare_weights(model, profile)
    v = y.values
    mean = float(w @ v / w.sum())
    num = float(w @ (v - mean) ** 2)
    den = float(g @ np.diff(v) ** 2)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def poincare_constant(model: KernelModel, profile: StationaryProfile) -> float:
    """
    Smallest c0 valid for every y on the window: the largest generalised eigenvalue of
    the Rayleigh pair, written in the difference variables d = D+ y.
    """
    w, g = _poincare_weights(model, profile)
    P = w.size
    C = np.tril(np.ones((P, P - 1)), -1)  # y = y_lo + C d
    W = np.diag(w) - np.outer(w, w) / w.sum()
    S = C.T @ W @ C
    keep = g > 1e-250 * g.max()
    S = S[np.ix_(keep, keep)]
    scale = 1.0 / np.sqrt(g[keep])
    M = scale[:, None] * S * scale[None, :]
    return float(eigh(0.5 * (M + M.T), eigvals_only=True)[-1])


def sample_poincare_sup(model: KernelModel, profile: StationaryProfile, rng: np.random.Generator,
                        samples: int = 1000) -> float:
    """Monte Carlo sup of the Rayleigh ratio over Gaussian random sequences."""
    best = 0.0
    for _ in range(samples):
        y = WeightedSeq(profile.window, rng.standard_normal(profile.window.size))
        best = max(best, poincare_rayleigh(model, profile, y))
    return best


######################################################################################
############################ Q-HAT SUPERSOLUTION #####################################
######################################################################################

def delta1_for_theta(theta2: float) -> float:
    """delta1 with 1 + log2((1 - delta1)/(1 + delta1)) = theta2."""
    r = 2.0 ** (theta2 - 1.0)
    return (1.0 - r) / (1.0 + r)


@dataclass
class SandwichReport:
    """
    Normalised sandwich constants of the q-hat cascade.

    c1 / c2 are taken over levels (n0, n_max]; c1_ext / c2_ext over the same cascade
    extended by a few levels. The sandwich holds when both constants survive the
    extension within a factor of two, i.e. they do not drift with n.
    """
    times: np.ndarray
    levels: np.ndarray
    values: np.ndarray
    theta2: float
    c1: float
    c2: float
    c1_at: tuple
    c2_at: tuple
    c1_ext: float
    c2_ext: float

    @property
    def passed(self) -> bool:
        if not (self.c1 > 0.0 and math.isfinite(self.c2) and self.c2 > 0.0):
            return False
        return self.c1_ext >= 0.5 * self.c1 and self.c2_ext <= 2.0 * self.c2

    def as_dict(self) -> dict:
        return {"theta2": self.theta2, "c1": self.c1, "c2": self.c2, "c1_at": list(self.c1_at),
                "c2_at": list(self.c2_at), "c1_extended": self.c1_ext, "c2_extended": self.c2_ext,
                "passed": self.passed}


def _sandwich_constants(model: KernelModel, levels, values, times, theta2: float, delta0: float, nu: float):
    weight = np.exp2(theta2 * levels[1:])[None, :]
    base = delta0 ** 1.5 * np.exp(-nu * times)[:, None]
    lower = weight * values[:, 1:] / base
    pos = times > 0.0
    upper = weight * values[pos][:, 1:] / (base[pos] * times[pos][:, None] ** (-theta2 / model.beta))
    i1 = np.unravel_index(np.argmin(lower), lower.shape)
    c1_at = (float(times[i1[0]]), int(levels[1 + i1[1]]))
    if not upper.size:
        return float(lower.min()), 0.0, c1_at, (0.0, int(levels[0]))
    i2 = np.unravel_index(np.argmax(upper), upper.shape)
    return float(lower.min()), float(upper.max()), c1_at, (float(times[pos][i2[0]]), int(levels[1 + i2[1]]))


def hatq_supersolution(model: KernelModel, n0: int, delta0: float, delta1: float, nu: float,
                       t_grid, n_max: int | None = None, extend: int = 5,
                       theta2: float | None = None) -> SandwichReport:
    """
    Exact solution of dq_n/dt = gamma(2^n)/4 (1/2 (1+delta1) q_{n-1} - (1-delta1) q_n), n > n0,
    with q_n(0) = 4 delta0^(3/2) and q_{n0}(t) = 4 delta0^(3/2) e^(-nu t).

    The boundary row is carried as an extra component decaying at rate nu, so the
    whole inhomogeneous cascade is a single matrix exponential. The matrix is lower
    triangular: the extra `extend` levels leave rows up to n_max untouched.

    Args:
        theta2: weight exponent of the sandwich, defaults to the one matched to delta1

    Returns:
        SandwichReport with values on levels n0..n_max
    """
    n_max = n0 + 10 if n_max is None else n_max
    if n_max <= n0 or extend < 1:
        raise ConfigError("q-hat cascade needs n_max > n0 and extend >= 1")
    full = np.arange(n0, n_max + extend + 1)
    g = np.exp(np.asarray(log_gamma(model, full.astype(float)))) / 4.0
    B = np.zeros((full.size, full.size))
    B[0, 0] = -nu
    for i in range(1, full.size):
        B[i, i] = -(1.0 - delta1) * g[i]
        B[i, i - 1] = 0.5 * (1.0 + delta1) * g[i]
    z0 = np.full(full.size, 4.0 * delta0 ** 1.5)
    times = np.asarray(t_grid, dtype=float)
    values_full = np.array([expm(B * t) @ z0 for t in times])

    matched = 1.0 + math.log2((1.0 - delta1) / (1.0 + delta1))
    theta2 = matched if theta2 is None else theta2
    keep = n_max - n0 + 1
    c1, c2, c1_at, c2_at = _sandwich_constants(model, full[:keep], values_full[:, :keep], times, theta2, delta0, nu)
    c1_ext, c2_ext, _, _ = _sandwich_constants(model, full, values_full, times, theta2, delta0, nu)
    report = SandwichReport(times, full[:keep], values_full[:, :keep], theta2, c1, c2, c1_at, c2_at, c1_ext, c2_ext)
    if not report.passed:
        logger.warning("q-hat sandwich failed: c1=%g at %s (extended %g), c2=%g at %s (extended %g)",
                       report.c1, report.c1_at, report.c1_ext, report.c2, report.c2_at, report.c2_ext)
    return report
