"""Closed-form survival criteria and the constant-drift phase diagram."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import integrate

from .env_law import EnvironmentLaw, OffspringDistribution, law_extremes

# m(1-h) within this of 1 counts as the divergent (infinite) case
INF_SLACK = 1e-12
QUAD_TOL = 1e-12
DEFAULT_TOL = 1e-9

CASE_M_LE_1, CASE_A, CASE_B, CASE_C = "M_le_1", "a", "b", "c"
REGIME_LS, REGIME_GS_ONLY, REGIME_EXTINCT = "I", "II", "III"


@dataclass(frozen=True)
class SurvivalClassification:
    local: bool
    global_: bool
    gs_functional_value: float
    lam: float
    case_label: str  # "LS", "GS_only" or "extinct"


@dataclass(frozen=True)
class CriticalDrifts:
    h_ls: float
    h_gs: float
    theorem_case: str
    tolerance: float
    phi_at_h_ls: float
    phi_at_one: float


def log_embedded_mean(m, h):
    """``log(m h / (1 - m (1 - h)))``, ``+inf`` once ``m (1 - h) >= 1``."""
    m = np.asarray(m, dtype=float)
    h = np.asarray(h, dtype=float)
    denom = 1.0 - m * (1.0 - h)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(m * h) - np.log(np.where(denom > INF_SLACK, denom, 1.0))
    return np.where(denom > INF_SLACK, val, np.inf)


def embedded_offspring_mean(site: tuple[OffspringDistribution, float]) -> float:
    """Expected number of first arrivals at ``x + 1`` from one particle at ``x``."""
    dist, h = site
    m = dist.mean
    denom = 1.0 - m * (1.0 - h)
    if denom <= INF_SLACK:
        return math.inf
    return m * h / denom


def _quad(f, a: float, b: float) -> float:
    val, _ = integrate.quad(f, a, b, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=400)
    return val


def _density_expectation(law: EnvironmentLaw, f) -> float:
    return math.fsum(p.density * _quad(f, p.lower, p.upper) for p in law.support_pieces)


def gs_functional(law: EnvironmentLaw) -> float:
    """``E[log(m h / (1 - m (1 - h)))]`` over the law, as an extended real.

    Any positive-probability set of sites with ``m (1 - h) >= 1`` makes the
    value ``+inf``.
    """
    if law.is_atomic:
        atoms = law.support_atoms
        vals = log_embedded_mean([a.dist.mean for a in atoms], [a.drift for a in atoms])
        if np.any(np.isinf(vals)):
            return math.inf
        return math.fsum(a.weight * float(v) for a, v in zip(atoms, vals))
    h = law.drift
    if h < 1.0:
        edge = 1.0 / (1.0 - h)
        if any(p.upper > edge * (1.0 + INF_SLACK) for p in law.support_pieces):
            return math.inf

    def integrand(m):
        # no slack here: quadrature nodes approach an integrable endpoint singularity
        return math.log(m * h) - math.log1p(-m * (1.0 - h))

    return _density_expectation(law, integrand)


def classify_local(law: EnvironmentLaw) -> bool:
    return law_extremes(law)[1] > 1.0


def classify(law: EnvironmentLaw) -> SurvivalClassification:
    lam = law_extremes(law)[1]
    value = gs_functional(law)
    local = lam > 1.0
    glob = local or value > 0
    label = "LS" if local else ("GS_only" if glob else "extinct")
    return SurvivalClassification(local, glob, value, lam, label)


def _one_minus_inverse(top: float) -> float:
    # a mean written as a small rational (10/9 say) gets 1 - 1/M computed exactly
    near = Fraction(top).limit_denominator(10**6)
    if abs(float(near) - top) <= 2 * math.ulp(top):
        return float(1 - 1 / near)
    return 1.0 - 1.0 / top


def local_survival_threshold(law: EnvironmentLaw) -> float:
    top, _ = law_extremes(law)
    return _one_minus_inverse(top) if top > 1.0 else 0.0


def _check_drift(law: EnvironmentLaw, h: float) -> None:
    if not (0.0 < h <= 1.0):
        raise ValueError(f"drift {h} outside (0, 1]")
    h_ls = local_survival_threshold(law)
    if h < h_ls - INF_SLACK:
        raise ValueError(f"drift {h} below the local-survival threshold {h_ls}; phi is undefined there")


def phi(law: EnvironmentLaw, h: float) -> float:
    """GS functional of ``law`` with every drift replaced by ``h``."""
    _check_drift(law, h)
    return gs_functional(law.with_drift(h))


def phi_derivative(law: EnvironmentLaw, h: float) -> float:
    _check_drift(law, h)
    if h <= local_survival_threshold(law) + INF_SLACK:
        raise ValueError("the derivative is only finite strictly above the local-survival threshold")

    def g(m):
        return 1.0 / h - m / (1.0 - m * (1.0 - h))

    if law.is_atomic:
        return math.fsum(a.weight * g(a.dist.mean) for a in law.support_atoms)
    return _density_expectation(law, g)


def _bisect_decreasing(f, lo: float, hi: float, tol: float) -> float:
    # f(lo) >= 0 >= f(hi); only signs are used, so f(lo) may be +inf
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        v = f(mid)
        if v > 0:
            lo = mid
        elif v < 0:
            hi = mid
        else:
            return mid
    return 0.5 * (lo + hi)


def critical_drifts(law: EnvironmentLaw, tol: float = DEFAULT_TOL) -> CriticalDrifts:
    """Thresholds ``h_LS <= h_GS`` of the constant-drift family through ``law``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    top, _ = law_extremes(law)
    if top <= 1.0:
        return CriticalDrifts(0.0, 0.0, CASE_M_LE_1, tol, phi(law, 1.0), phi(law, 1.0))
    h_ls = _one_minus_inverse(top)
    at_ls = phi(law, h_ls)
    at_one = phi(law, 1.0)
    if at_one > 0:
        return CriticalDrifts(h_ls, math.inf, CASE_C, tol, at_ls, at_one)
    if at_ls < 0:
        return CriticalDrifts(h_ls, h_ls, CASE_B, tol, at_ls, at_one)
    if at_one == 0:
        h_gs = 1.0
    elif at_ls == 0:
        h_gs = h_ls
    else:
        h_gs = _bisect_decreasing(lambda h: phi(law, h), h_ls, 1.0, tol)
    return CriticalDrifts(h_ls, h_gs, CASE_A, tol, at_ls, at_one)


def regime(h: float, crit: CriticalDrifts) -> str:
    # h_LS = 1 - 1/M carries rounding; a drift within INF_SLACK of it is the threshold itself
    if abs(h - crit.h_ls) <= INF_SLACK:
        h = crit.h_ls
    if h < crit.h_ls:
        return REGIME_LS
    if h < crit.h_gs:
        return REGIME_GS_ONLY
    return REGIME_EXTINCT


def classify_regimes(law: EnvironmentLaw, h_grid: Sequence[float], tol: float = DEFAULT_TOL) -> list[str]:
    """Label each drift I (LS), II (GS without LS) or III (no GS)."""
    crit = critical_drifts(law, tol)
    out = []
    for h in h_grid:
        if not (0.0 < h <= 1.0):
            raise ValueError(f"drift {h} outside (0, 1]")
        out.append(regime(float(h), crit))
    return out


def regime_sweep(law: EnvironmentLaw, h_grid: Sequence[float], tol: float = DEFAULT_TOL):
    """Rows ``(h, phi(h) or None below h_LS, regime)``."""
    crit = critical_drifts(law, tol)
    rows = []
    for h in h_grid:
        h = float(h)
        if not (0.0 < h <= 1.0):
            raise ValueError(f"drift {h} outside (0, 1]")
        val = phi(law, h) if h >= crit.h_ls - INF_SLACK else None
        rows.append((h, val, regime(h, crit)))
    return rows, crit
