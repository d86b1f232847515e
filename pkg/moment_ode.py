# moment_ode.py

"""
Closed moment system for the peak masses m_n, centroids p_n and variances q_n.

Every rate is assembled from eight per-peak integrals of the intra-peak profile:

    C0, C1, C2 : iint K g g (u - h - 1 - p_h)^i   (coagulation output moments)
    D1, D2     : iint K g g (y - h - p_h)^i       (coagulation loss moments)
    F0, F1, F2 : int gamma g (y - h - p_h)^i       (fragmentation moments)

The leading-order closure freezes k and gamma at the centroid and linearises the
log-sum, which reproduces the classical three-term equations. The Gaussian
closure evaluates the same integrals by Gauss-Hermite quadrature against a
normal profile N(h + p_h, q_h).

The lowest window peak does not fragment and the kernels vanish above the
truncation index, matching grid_sim.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.integrate import solve_ivp

from errors import ConfigError, IntegrationError, ModelBreakdown
from kernels import LN2, K_at, KernelModel, log_gamma, log_k
from stationary import IndexWindow, ShiftSequence, StationaryProfile, m_bar

logger = logging.getLogger(__name__)

# peaks lighter than this carry no meaningful centroid or variance
ABSENT_MASS = 1e-250


@dataclass(frozen=True, eq=False)
class MomentState:
    window: IndexWindow
    t: float
    m: np.ndarray
    p: np.ndarray
    q: np.ndarray
    delta0: float = 0.05
    N: int | None = None
    absent: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("m", "p", "q"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.window.size,):
                raise ConfigError(f"{name} must have {self.window.size} entries")
            object.__setattr__(self, name, arr)
        if self.N is None:
            object.__setattr__(self, "N", self.window.n_hi)
        if self.absent is None:
            object.__setattr__(self, "absent", self.m < ABSENT_MASS)
        above = self.window.indices > self.N
        if np.any(self.m[above] != 0.0):
            raise ConfigError("masses above the truncation index must vanish")

    @property
    def indices(self) -> np.ndarray:
        return self.window.indices

    @property
    def present(self) -> np.ndarray:
        return ~self.absent & (self.indices <= self.N)

    def shift(self) -> ShiftSequence:
        return ShiftSequence.from_values(self.window, self.p)

    def frame(self) -> pd.DataFrame:
        keep = self.present
        return pd.DataFrame({"t": self.t, "n": self.indices[keep], "m_n": self.m[keep],
                             "p_n": self.p[keep], "q_n": self.q[keep]})


class ClosureOptions(BaseModel):
    """Which rule closes the O(q) remainders."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    drop_oq_terms: bool = True
    oq_gaussian: bool = False
    quadrature_points: int = 7

    @model_validator(mode="after")
    def _one(self):
        if self.drop_oq_terms == self.oq_gaussian:
            raise ValueError("exactly one closure must be active")
        return self


def state_from_profile(profile: StationaryProfile, N: int | None = None, delta0: float = 0.05,
                       t: float = 0.0) -> MomentState:
    window = profile.window
    N = window.n_hi if N is None else N
    m = np.where(window.indices > N, 0.0, np.exp(profile.log_m_bar))
    return MomentState(window, t, m, profile.shift.p.copy(), np.zeros(window.size), delta0, N)


######################################################################################
############################ PER-PEAK INTEGRALS ######################################
######################################################################################

def _leading_integrals(model, x, q):
    kd = np.exp(np.asarray(log_k(model, x)) - (x + 1.0) * LN2)
    gd = np.exp(np.asarray(log_gamma(model, x)))
    zero = np.zeros_like(x)
    return {"c0": kd, "c1": zero, "c2": 0.5 * kd * q, "d1": zero, "d2": kd * q,
            "f0": gd, "f1": zero, "f2": gd * q}


def _gaussian_integrals(model, x, q, points):
    z, w = hermegauss(points)
    w = w / w.sum()
    s = np.sqrt(np.maximum(q, 0.0))[:, None]
    Y = x[:, None] + s * z[None, :]                      # (P, Q)
    dev = Y - x[:, None]
    Kyz = np.asarray(K_at(model, Y[:, :, None], Y[:, None, :]))  # (P, Q, Q)
    u_dev = np.logaddexp2(Y[:, :, None], Y[:, None, :]) - 1.0 - x[:, None, None]
    ww = w[:, None] * w[None, :]
    g = np.exp(np.asarray(log_gamma(model, Y)))
    return {
        "c0": np.einsum("ab,nab->n", ww, Kyz),
        "c1": np.einsum("ab,nab->n", ww, Kyz * u_dev),
        "c2": np.einsum("ab,nab->n", ww, Kyz * u_dev ** 2),
        "d1": np.einsum("ab,nab->n", ww, Kyz * dev[:, :, None]),
        "d2": np.einsum("ab,nab->n", ww, Kyz * dev[:, :, None] ** 2),
        "f0": g @ w,
        "f1": (g * dev) @ w,
        "f2": (g * dev ** 2) @ w,
    }


def peak_integrals(model: KernelModel, ns, p, q, closure: ClosureOptions, top: int):
    """
    Integrals per unit mass: c* = C*/m_h^2, d* = D*/m_h^2, f* = F*/m_h.

    Coagulation integrals vanish for h >= top, fragmentation ones for the lowest peak.
    """
    x = ns + p
    if closure.oq_gaussian:
        out = _gaussian_integrals(model, x, q, closure.quadrature_points)
    else:
        out = _leading_integrals(model, x, q)
    coag_off = ns >= top
    for key in ("c0", "c1", "c2", "d1", "d2"):
        out[key] = np.where(coag_off, 0.0, out[key])
    for key in ("f0", "f1", "f2"):
        out[key] = np.where(ns == ns[0], 0.0, out[key])
    return out


def _ratios(log_m, live):
    """r_n = m_{n-1}^2/m_n and s_n = m_{n+1}/m_n, zero where a neighbour is missing."""
    P = log_m.size
    r = np.zeros(P)
    s = np.zeros(P)
    lm = np.where(live, log_m, -np.inf)
    both_lo = live[1:] & live[:-1]
    r[1:] = np.where(both_lo, np.exp(2.0 * lm[:-1] - np.where(both_lo, lm[1:], 0.0)), 0.0)
    s[:-1] = np.where(both_lo, np.exp(lm[1:] - np.where(both_lo, lm[:-1], 0.0)), 0.0)
    return r, s


def relative_rates(model: KernelModel, ns, log_m, p, q, live, top, closure: ClosureOptions):
    """
    Returns (dm/m, dp, dq) for every peak; entries of dead peaks are zero.

    `live` marks peaks that take part, `top` is the effective truncation index.
    """
    q = np.maximum(q, 0.0)
    I = peak_integrals(model, ns, p, q, closure, top)
    r, s = _ratios(log_m, live)
    m = np.where(live, np.exp(np.where(live, log_m, 0.0)), 0.0)

    dm_lo = np.zeros_like(p)
    dm_hi = np.zeros_like(p)
    dm_lo[1:] = p[:-1] - p[1:]           # p_{n-1} - p_n
    dm_hi[:-1] = p[1:] - p[:-1]          # p_{n+1} - p_n

    def below(key):
        out = np.zeros_like(p)
        out[1:] = I[key][:-1]
        return out

    def above(key):
        out = np.zeros_like(p)
        out[:-1] = I[key][1:]
        return out

    c0b, c1b, c2b = below("c0"), below("c1"), below("c2")
    f0a, f1a, f2a = above("f0"), above("f1"), above("f2")

    dlog_m = (0.5 * LN2 * c0b * r - LN2 * I["c0"] * m - 0.25 * I["f0"] + 0.5 * f0a * s)
    dp = (0.5 * LN2 * r * (c1b + dm_lo * c0b) - LN2 * m * I["d1"] - 0.25 * I["f1"]
          + 0.5 * s * (f1a + dm_hi * f0a))
    dq = (0.5 * LN2 * r * (c2b + 2.0 * dm_lo * c1b + dm_lo ** 2 * c0b - q * c0b)
          - LN2 * m * (I["d2"] - q * I["c0"])
          - 0.25 * (I["f2"] - q * I["f0"])
          + 0.5 * s * (f2a + 2.0 * dm_hi * f1a + dm_hi ** 2 * f0a - q * f0a))
    dead = ~live
    return (np.where(dead, 0.0, dlog_m), np.where(dead, 0.0, dp), np.where(dead, 0.0, dq))


def _live(state: MomentState):
    live = state.present.copy()
    top = int(state.indices[live].max()) if live.any() else state.window.n_lo
    return live, min(top, state.N)


def _state_rates(model, state, closure):
    live, top = _live(state)
    log_m = np.log(np.where(live, state.m, 1.0))
    return relative_rates(model, state.indices, log_m, state.p, state.q, live, top, closure)


######################################################################################
############################ RIGHT-HAND SIDES ########################################
######################################################################################

def rhs_m(model: KernelModel, state: MomentState, closure: ClosureOptions = ClosureOptions()):
    """dm_n/dt; at n = N there is no outgoing coagulation."""
    dlog_m, _, _ = _state_rates(model, state, closure)
    return dlog_m * state.m


def _decomposed_leading(model, state, decomposition):
    """
    gamma(2^(n+p_n))/4 times the incoming ratio (1+2^(n-1)y_{n-1})^2/(1+2^n y_n) and
    the outgoing weight 4 mu_bar_n gamma(2^(n+1+p_{n+1}))/gamma(2^(n+p_n)) (1+2^(n+1)y_{n+1})/(1+2^n y_n).
    """
    live, top = _live(state)
    ns = state.indices
    y = np.asarray(decomposition.y.values, dtype=float)
    prof = m_bar(model, decomposition.A, state.shift())
    x = ns + state.p
    lam = np.exp(np.asarray(log_gamma(model, x))) / 4.0
    g_up = np.exp(np.asarray(log_gamma(model, ns + 1 + state.shift().at(ns + 1))))
    one = 1.0 + np.exp2(ns.astype(float)) * y
    incoming = np.zeros_like(one)
    incoming[1:] = one[:-1] ** 2 / one[1:]
    outgoing = np.zeros_like(one)
    outgoing[:-1] = 4.0 * prof.mu_bar[:-1] * g_up[:-1] / (4.0 * lam[:-1]) * one[1:] / one[:-1]
    incoming[~live] = 0.0
    incoming[1:][~live[:-1]] = 0.0
    outgoing[ns >= top] = 0.0
    outgoing[~live] = 0.0
    return live, lam, incoming, outgoing


def rhs_p(model: KernelModel, state: MomentState, decomposition=None,
          closure: ClosureOptions = ClosureOptions()):
    """
    dp_n/dt.

    Without a decomposition the rates come from mass ratios; with one they use
    mu_bar_n(A, p) and the (1 + 2^n y_n) ratios. Both agree when the decomposition
    represents the state exactly.
    """
    _, dp, _ = _state_rates(model, state, closure)
    if decomposition is None:
        return dp
    live, lam, incoming, outgoing = _decomposed_leading(model, state, decomposition)
    p = state.p
    d_lo = np.zeros_like(p)
    d_hi = np.zeros_like(p)
    d_lo[1:] = p[:-1] - p[1:]
    d_hi[:-1] = p[:-1] - p[1:]           # p_n - p_{n+1}
    leading = lam * (incoming * d_lo - outgoing * d_hi)
    if closure.drop_oq_terms:
        return np.where(live, leading, 0.0)
    _, dp_lead, _ = _state_rates(model, state, ClosureOptions())
    return np.where(live, leading + dp - dp_lead, 0.0)


def rhs_q(model: KernelModel, state: MomentState, decomposition=None,
          closure: ClosureOptions = ClosureOptions()):
    """dq_n/dt: contraction toward q_{n-1}/2 from below and toward q_{n+1} from above."""
    _, _, dq = _state_rates(model, state, closure)
    if decomposition is None:
        return dq
    live, lam, incoming, outgoing = _decomposed_leading(model, state, decomposition)
    p, q = state.p, np.maximum(state.q, 0.0)
    lower = np.zeros_like(p)
    upper = np.zeros_like(p)
    lower[1:] = 0.5 * q[:-1] - q[1:] + (p[:-1] - p[1:]) ** 2
    upper[:-1] = (q[:-1] - q[1:]) - (p[1:] - p[:-1]) ** 2
    leading = lam * (incoming * lower - outgoing * upper)
    if closure.drop_oq_terms:
        return np.where(live, leading, 0.0)
    _, _, dq_lead = _state_rates(model, state, ClosureOptions())
    return np.where(live, leading + dq - dq_lead, 0.0)


######################################################################################
############################ INTEGRATION #############################################
######################################################################################

def integrate(model: KernelModel, state0: MomentState, t_end: float, tol: float = 1e-8,
              sample_times=None, closure: ClosureOptions = ClosureOptions()):
    """
    Integrates (ln m, p, q) of the present peaks with an implicit Radau scheme.

    Args:
        model: kernels
        state0: initial moments; absent peaks stay out of the system
        t_end: final time
        tol: relative tolerance; absolute tolerances are scaled per variable
        sample_times: dense-output times, default 101 uniform samples
        closure: O(q) closure

    Returns:
        list of MomentState, one per sample time

    Raises:
        ModelBreakdown when some p_n leaves [-delta0, delta0]
        IntegrationError when the solver fails
    """
    if not t_end > state0.t:
        raise ConfigError("t_end must exceed the initial time")
    live, top = _live(state0)
    ns = state0.indices
    k = int(live.sum())
    times = np.linspace(state0.t, t_end, 101) if sample_times is None else np.asarray(sample_times, float)
    delta0 = state0.delta0

    def unpack(v):
        log_m = np.zeros(ns.size)
        p = state0.p.copy()
        q = state0.q.copy()
        log_m[live] = v[:k]
        p[live] = v[k:2 * k]
        q[live] = v[2 * k:]
        return log_m, p, q

    def fun(t, v):
        log_m, p, q = unpack(v)
        dl, dp, dq = relative_rates(model, ns, log_m, p, q, live, top, closure)
        return np.concatenate([dl[live], dp[live], dq[live]])

    def breakdown(t, v):
        return delta0 - np.max(np.abs(v[k:2 * k]))

    breakdown.terminal = True
    breakdown.direction = -1

    v0 = np.concatenate([np.log(state0.m[live]), state0.p[live], state0.q[live]])
    atol = np.concatenate([np.full(k, tol), np.full(k, tol * delta0), np.full(k, tol * delta0 ** 2)])
    sol = solve_ivp(fun, (state0.t, t_end), v0, method="Radau", t_eval=times, rtol=tol, atol=atol,
                    events=breakdown)
    if sol.status == 1:
        v_bad = sol.y_events[0][0]
        n_bad = int(ns[live][np.argmax(np.abs(v_bad[k:2 * k]))])
        raise ModelBreakdown(f"p_{n_bad} left [-{delta0}, {delta0}] at t={sol.t_events[0][0]:.4g}",
                             n=n_bad, t=float(sol.t_events[0][0]))
    if sol.status < 0:
        raise IntegrationError(sol.message)

    trajectory = []
    clipped = 0
    for i, t in enumerate(sol.t):
        log_m, p, q = unpack(sol.y[:, i])
        if np.any(q[live] < 0.0):
            clipped += int(np.sum(q[live] < 0.0))
        m = np.where(live, np.exp(log_m), 0.0)
        trajectory.append(MomentState(state0.window, float(t), m, p, np.maximum(q, 0.0), delta0,
                                      state0.N, ~live))
    if clipped:
        logger.warning("clipped %d negative variances to zero", clipped)
    logger.info("moment run reached t=%.5g with %d rhs evaluations", sol.t[-1], sol.nfev)
    return trajectory


######################################################################################
############################ IDENTITY CHECKS #########################################
######################################################################################

INTEGRAL_NAMES = ("c0", "c1", "c2", "d1", "d2", "f0", "f1", "f2")


@dataclass
class TaylorReport:
    table: pd.DataFrame
    max_ratio: dict

    def bounded(self, limit: float) -> bool:
        return all(v <= limit for v in self.max_ratio.values() if np.isfinite(v))


def taylor_identity_check(model: KernelModel, state) -> TaylorReport:
    """
    Compares the exact per-peak integrals of a grid measure with their leading forms.

    The reported ratio is |exact - leading| / (scale q_h), with scale K(2^x,2^x) m^2
    for coagulation integrals and gamma(2^x) m for fragmentation ones.
    """
    xs = state.xs
    masses = state.masses
    rows = []
    for i, n in enumerate(state.config.window.indices):
        w = masses[i]
        m = w.sum()
        if m < ABSENT_MASS:
            continue
        x_c = w @ xs[i] / m
        q = float(w @ (xs[i] - x_c) ** 2 / m)
        y = xs[i]
        K = np.asarray(K_at(model, y[:, None], y[None, :]))
        pair = K * w[:, None] * w[None, :]
        u_dev = np.logaddexp2(y[:, None], y[None, :]) - 1.0 - x_c
        dev = y - x_c
        g = np.exp(np.asarray(log_gamma(model, y))) * w
        exact = {
            "c0": pair.sum(), "c1": (pair * u_dev).sum(), "c2": (pair * u_dev ** 2).sum(),
            "d1": (pair * dev[:, None]).sum(), "d2": (pair * dev[:, None] ** 2).sum(),
            "f0": g.sum(), "f1": (g * dev).sum(), "f2": (g * dev ** 2).sum(),
        }
        lead = _leading_integrals(model, np.array([x_c]), np.array([q]))
        row = {"n": int(n), "q": q}
        for key in INTEGRAL_NAMES:
            scale = m * m if key[0] in "cd" else m
            base = (lead["c0"][0] if key[0] in "cd" else lead["f0"][0]) * scale
            remainder = exact[key] - lead[key][0] * scale
            row[f"rem_{key}"] = remainder / base
            row[f"ratio_{key}"] = abs(remainder) / (base * q) if q > 0.0 else np.nan
        rows.append(row)
    table = pd.DataFrame(rows)
    max_ratio = {key: float(np.nanmax(table[f"ratio_{key}"])) if table[f"ratio_{key}"].notna().any()
                 else 0.0 for key in INTEGRAL_NAMES}
    return TaylorReport(table, max_ratio)


def mass_identity_check(state: MomentState, M: float) -> dict:
    """|M - sum 2^(n+p_n) m_n| against sum 2^n m_n q_n; returns the implied constant."""
    keep = state.present
    ns = state.indices[keep]
    lhs = abs(M - float(np.sum(np.exp2(ns + state.p[keep]) * state.m[keep])))
    rhs = float(np.sum(np.exp2(ns.astype(float)) * state.m[keep] * state.q[keep]))
    return {"defect": lhs, "q_weight": rhs, "constant": lhs / rhs if rhs > 0.0 else np.nan}


# ------ ORACLE COMPARISON ------ #

ORACLE_TOLERANCES = {"m_rel": 0.05, "p_abs": 0.005, "q_rel": 0.15}


def oracle_gap(trajectory, reference) -> pd.DataFrame:
    """
    Per-sample distance between a moment trajectory and a reference one (usually grid extractions).

    Args:
        trajectory: MomentStates from integrate
        reference: MomentStates at the same times

    Returns:
        DataFrame with columns t, m_rel, p_abs, q_rel; maxima over peaks present in both
    """
    if len(trajectory) != len(reference):
        raise ConfigError(f"{len(trajectory)} samples against {len(reference)} reference samples")
    rows = []
    for a, b in zip(trajectory, reference):
        if a.window != b.window or not np.isclose(a.t, b.t, rtol=1e-12, atol=1e-12):
            raise ConfigError(f"sample at t={a.t} does not line up with reference t={b.t}")
        keep = a.present & b.present
        if not keep.any():
            rows.append({"t": a.t, "m_rel": np.nan, "p_abs": np.nan, "q_rel": np.nan})
            continue
        m_rel = np.abs(a.m[keep] - b.m[keep]) / b.m[keep]
        p_abs = np.abs(a.p[keep] - b.p[keep])
        # variances that vanish in the reference carry no relative information
        q_ref = b.q[keep]
        q_live = q_ref > 0.0
        q_rel = np.abs(a.q[keep][q_live] - q_ref[q_live]) / q_ref[q_live]
        rows.append({"t": a.t, "m_rel": float(m_rel.max()), "p_abs": float(p_abs.max()),
                     "q_rel": float(q_rel.max()) if q_rel.size else 0.0})
    return pd.DataFrame(rows)
