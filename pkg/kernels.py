# kernels.py

"""
Coagulation and fragmentation kernels.

The coagulation kernel is K(xi, eta) = k((xi+eta)/2) Q(2 eta/(xi+eta) - 1) / (xi+eta),
fragmentation is binary halving at rate gamma(xi). Canonical forms:

    k(xi)     = k0 + xi**(alpha+1)
    gamma(xi) = gamma0 + xi**beta

Functions named eval_* take sizes xi > 0. Functions named log_* or *_at take the
logarithmic size x = log2(xi) so that peaks far outside the floating-point range
can still be handled.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from errors import DomainError, ValidationFailure

logger = logging.getLogger(__name__)

LN2 = np.log(2.0)


class KernelModel(BaseModel):
    """
    Parameters of the kernel family.

    `flat=True` selects the degenerate test kernels k = k0, gamma = gamma0. They
    violate the growth assumptions on purpose and are exempt from validation.

    `k1, k2, gamma1, gamma2` are optional declared derivative bounds. Left as
    None, validate_assumptions reports the minimal admissible values instead of
    checking against declared ones.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(0.3, gt=0.0, lt=1.0)
    beta: float = Field(1.5, gt=1.0, lt=2.0)
    beta_tilde: float = 0.0
    k0: float = Field(1.0, gt=0.0)
    gamma0: float = Field(1.0, gt=0.0)
    k1: float | None = Field(None, gt=0.0)
    k2: float | None = Field(None, gt=0.0)
    gamma1: float | None = Field(None, gt=0.0)
    gamma2: float | None = Field(None, gt=0.0)
    # half-width w of supp Q; must stay below 1/3 so that epsilon0 < 1
    q_support: float = Field(0.25, gt=0.0, lt=1.0 / 3.0)
    flat: bool = False

    @model_validator(mode="after")
    def _check_exponents(self):
        if not self.beta_tilde < self.beta:
            raise ValueError(f"beta_tilde={self.beta_tilde} must be below beta={self.beta}")
        return self

    @property
    def alpha_bar(self) -> float:
        return self.alpha + 1.0

    @property
    def beta_bar(self) -> float:
        return self.beta

    @property
    def epsilon0(self) -> float:
        """Half-width of the support of K(2^y, 2^z) in |y - z|, rounded up by 1e-12."""
        w = self.q_support
        return float(np.log2((1.0 + w) / (1.0 - w))) + 1e-12

    @property
    def log_theta_limit(self) -> float:
        """Limit of ln theta_n for a constant shift as n -> infinity."""
        if self.flat:
            return 0.0
        return float((self.alpha - self.beta + 1.0) * LN2)


def _positive(xi, name="xi"):
    arr = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} must be positive and finite, got {xi!r}")
    return arr


def _finite(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {x!r}")
    return arr


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


######################################################################################
############################ KERNEL EVALUATION #######################################
######################################################################################

def eval_k(model: KernelModel, xi):
    """Coagulation rate profile k(xi)."""
    xi = _positive(xi)
    if model.flat:
        return _out(np.full_like(xi, model.k0))
    return _out(model.k0 + xi ** model.alpha_bar)


def eval_gamma(model: KernelModel, xi):
    """Fragmentation rate gamma(xi)."""
    xi = _positive(xi)
    if model.flat:
        return _out(np.full_like(xi, model.gamma0))
    return _out(model.gamma0 + xi ** model.beta)


def eval_Q(model: KernelModel, s):
    """Smooth bump cut-off: Q(0) = 1, Q(s) = Q(-s), Q = 0 for |s| >= q_support."""
    s = _finite(s, "s")
    r2 = (s / model.q_support) ** 2
    inside = r2 < 1.0
    safe = np.where(inside, r2, 0.0)
    return _out(np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0))


def eval_K(model: KernelModel, xi, eta):
    """Coagulation kernel K(xi, eta); symmetric and zero unless eta/xi lies in (1/2, 2)."""
    xi = _positive(xi)
    eta = _positive(eta, "eta")
    total = xi + eta
    # (eta - xi)/(xi + eta) flips sign exactly under swapping, so K is exactly symmetric
    s = (eta - xi) / total
    return _out(np.asarray(eval_k(model, total / 2.0)) * np.asarray(eval_Q(model, s)) / total)


# ------ LOGARITHMIC VARIABLES ------ #

def log_k(model: KernelModel, x):
    """ln k(2^x)."""
    x = _finite(x)
    if model.flat:
        return _out(np.full_like(x, np.log(model.k0)))
    return _out(np.logaddexp(np.log(model.k0), model.alpha_bar * LN2 * x))


def log_gamma(model: KernelModel, x):
    """ln gamma(2^x)."""
    x = _finite(x)
    if model.flat:
        return _out(np.full_like(x, np.log(model.gamma0)))
    return _out(np.logaddexp(np.log(model.gamma0), model.beta * LN2 * x))


def gamma_at(model: KernelModel, x):
    """gamma(2^x) for a log-size x."""
    return _out(np.exp(np.asarray(log_gamma(model, x))))


def k_elasticity(model: KernelModel, x):
    """xi k'(xi)/k(xi) at xi = 2^x."""
    x = _finite(x)
    if model.flat:
        return _out(np.zeros_like(x))
    return _out(model.alpha_bar * expit(model.alpha_bar * LN2 * x - np.log(model.k0)))


def gamma_elasticity(model: KernelModel, x):
    """xi gamma'(xi)/gamma(xi) at xi = 2^x."""
    x = _finite(x)
    if model.flat:
        return _out(np.zeros_like(x))
    return _out(model.beta * expit(model.beta * LN2 * x - np.log(model.gamma0)))


def K_at(model: KernelModel, y, z):
    """
    K(2^y, 2^z) computed in log space.

    Uses 2^y + 2^z = 2^u with u = logaddexp2(y, z), and the cut-off argument
    (2^z - 2^y)/(2^z + 2^y) = tanh((z - y) ln2 / 2).
    """
    y = _finite(y, "y")
    z = _finite(z, "z")
    u = np.logaddexp2(y, z)
    s = np.tanh(0.5 * LN2 * (z - y))
    q = np.asarray(eval_Q(model, s))
    return _out(np.exp(np.asarray(log_k(model, u - 1.0)) - LN2 * u) * q)


######################################################################################
############################ ASSUMPTION VALIDATION ###################################
######################################################################################

@dataclass
class AssumptionReport:
    passed: bool
    k1: float
    k2: float
    gamma1: float
    gamma2: float
    c_k: float
    epsilon0: float
    offending: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def as_rows(self):
        return [
            {"quantity": "k1", "value": self.k1},
            {"quantity": "k2", "value": self.k2},
            {"quantity": "gamma1", "value": self.gamma1},
            {"quantity": "gamma2", "value": self.gamma2},
            {"quantity": "C_K", "value": self.c_k},
            {"quantity": "epsilon0", "value": self.epsilon0},
        ]


def _derivatives(model: KernelModel, xi):
    a, b = model.alpha_bar, model.beta
    dk = a * xi ** (a - 1.0)
    d2k = a * (a - 1.0) * xi ** (a - 2.0)
    dg = b * xi ** (b - 1.0)
    d2g = b * (b - 1.0) * xi ** (b - 2.0)
    return dk, d2k, dg, d2g


def coagulation_constant(model: KernelModel, y_range=(-20.0, 20.0), samples=801):
    """Uniform constant C_K with (2^y + 2^z) K(2^y, 2^z) <= C_K (1 + 2^y 2^z) on |y - z| < 1."""
    y = np.linspace(y_range[0], y_range[1], samples)[:, None]
    d = np.linspace(-1.0, 1.0, 203)[1:-1][None, :]
    z = y + d
    u = np.logaddexp2(y, z)
    weighted = np.exp(np.asarray(log_k(model, u - 1.0))) * np.asarray(eval_Q(model, np.tanh(0.5 * LN2 * d)))
    # 1 + 2^(y+z) in log form keeps the large-y corner finite
    ratio = weighted / np.exp(np.logaddexp(0.0, LN2 * (y + z)))
    return float(ratio.max())


def validate_assumptions(model: KernelModel, grid=None) -> AssumptionReport:
    """
    Checks the growth and derivative bounds of k and gamma on a sample grid.

    Args:
        model: kernel parameters
        grid: xi sample points, default 2001 log-spaced points on [1e-6, 1e6]

    Returns:
        AssumptionReport with minimal admissible k1, k2, gamma1, gamma2 and C_K

    Raises:
        ValidationFailure when a declared bound, positivity or monotonicity fails.
    """
    xi = _positive(np.logspace(-6.0, 6.0, 2001) if grid is None else grid, "grid")
    c_k = coagulation_constant(model)

    if model.flat:
        return AssumptionReport(True, 0.0, 0.0, 0.0, 0.0, c_k, model.epsilon0,
                                notes=["flat test kernels are validation-exempt"])

    a, b = model.alpha_bar, model.beta
    big = xi >= 1.0
    dk, d2k, dg, d2g = _derivatives(model, xi)

    # WEIGHTS: the bound changes exponent at xi = 1
    w_k1 = np.where(big, xi ** model.alpha, xi ** (a - 1.0))
    w_k2 = np.where(big, xi ** (model.alpha - 1.0), xi ** (a - 2.0))
    w_g1 = np.where(big, xi ** (b - 1.0), xi ** (model.beta_bar - 1.0))
    w_g2 = np.where(big, xi ** (b - 2.0), xi ** (model.beta_bar - 2.0))

    ratios = {
        "k1": np.abs(dk) / w_k1,
        "k2": np.abs(d2k) / w_k2,
        "gamma1": np.abs(dg) / w_g1,
        "gamma2": np.abs(d2g) / w_g2,
    }
    minimal = {name: float(r.max()) for name, r in ratios.items()}

    offending = []
    notes = []
    for name, r in ratios.items():
        declared = getattr(model, name)
        if declared is not None:
            bad = xi[r > declared * (1.0 + 1e-12)]
            if bad.size:
                notes.append(f"{name}={declared} too small, need {minimal[name]:.6g}")
                offending.extend(float(v) for v in bad)

    # CHECK: positivity and monotonicity of gamma on [1, inf)
    k_vals = np.asarray(eval_k(model, xi))
    g_vals = np.asarray(eval_gamma(model, xi))
    if np.any(k_vals <= 0.0) or np.any(g_vals <= 0.0):
        notes.append("k or gamma not positive")
        offending.extend(float(v) for v in xi[(k_vals <= 0.0) | (g_vals <= 0.0)])
    g_big = g_vals[big]
    if g_big.size > 1 and np.any(np.diff(g_big) <= 0.0):
        notes.append("gamma not increasing on [1, inf)")
        offending.extend(float(v) for v in xi[big][1:][np.diff(g_big) <= 0.0])

    # CHECK: leading-order asymptotics k ~ xi^alpha_bar, gamma ~ xi^beta at the top of the grid
    top = xi.max()
    if top >= 1e4:
        drift_k = abs(float(eval_k(model, top)) / top ** a - 1.0)
        drift_g = abs(float(eval_gamma(model, top)) / top ** b - 1.0)
        if max(drift_k, drift_g) > 1e-2:
            notes.append("large-size asymptotics not reached on grid")

    passed = not offending
    report = AssumptionReport(passed, minimal["k1"], minimal["k2"], minimal["gamma1"],
                              minimal["gamma2"], c_k, model.epsilon0, offending, notes)
    if not passed:
        raise ValidationFailure("; ".join(notes), offending)
    logger.debug("kernel assumptions ok: %s", report.as_rows())
    return report
