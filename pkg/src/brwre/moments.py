"""Quenched first moments: log-space lattice recursion, a Feynman-Kac
Monte Carlo cross-check, and estimation of the growth profile beta."""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from .env_law import (Environment, EnvironmentLaw, InvalidLawError, ValidationReport, law_extremes,
                      sample_environment, validate_law)
from .streams import TAG_ENVIRONMENT, TAG_WALK, default_workers, derive_seed, generator

NEG_INF = -np.inf
DEFAULT_GAMMA = 0.1


@dataclass(frozen=True)
class MomentProfile:
    """``log_values[x] = log E_omega[eta_n(x)]`` for ``x = 0..n``."""

    n: int
    log_values: np.ndarray
    env_ref: str

    @property
    def log_total(self) -> float:
        return float(logsumexp(self.log_values))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "log_expected"])
        for x, v in enumerate(self.log_values):
            w.writerow([x, format_real(v)])
        return buf.getvalue()


@dataclass(frozen=True)
class GrowthProfile:
    x: np.ndarray
    beta_hat: np.ndarray
    stderr: np.ndarray
    n_used: int
    replicas: int

    def __len__(self) -> int:
        return len(self.x)

    @property
    def grid(self) -> list[tuple[float, float, float]]:
        return list(zip(self.x.tolist(), self.beta_hat.tolist(), self.stderr.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "beta_hat", "stderr"])
        for x, b, s in self.grid:
            w.writerow([format_real(x), format_real(b), format_real(s)])
        return buf.getvalue()


@dataclass(frozen=True)
class WalkTrajectory:
    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions)
        if p.size == 0 or p[0] != 0 or np.any(~np.isin(np.diff(p), (0, 1))):
            raise ValueError("positions must start at 0 with increments in {0, 1}")

    @property
    def local_times(self) -> np.ndarray:
        return np.bincount(np.asarray(self.positions))


def format_real(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    if math.isnan(v):
        raise ValueError("refusing to emit NaN")
    return repr(float(v))


def _log_weights(env: Environment):
    """Per-site log weights for staying put and for stepping right."""
    m = env.mean
    h = env.drift
    with np.errstate(divide="ignore"):
        return np.log(m) + np.log1p(-h), np.log(m) + np.log(h)


def log_moment_lattice(env: Environment, n: int, start: int = 0) -> np.ndarray:
    """All rows ``k = 0..n`` of ``log E^start_omega[eta_k(start + j)]``.

    Entry ``[k, j]`` is the log expected number of particles at site
    ``start + j`` after ``k`` generations, starting from one particle at
    ``start``. Columns with ``j > k`` are ``-inf``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if start < 0 or len(env) < start + n + 1:
        raise ValueError(f"environment has {len(env)} sites, need sites {start}..{start + n}")
    ls, lm = _log_weights(env)
    stay = ls[start:start + n + 1]
    move = lm[start:start + n]
    out = np.full((n + 1, n + 1), NEG_INF)
    out[0, 0] = 0.0
    for k in range(1, n + 1):
        prev = out[k - 1, :k]
        row = out[k]
        row[:k] = prev + stay[:k]
        row[1:k + 1] = np.logaddexp(row[1:k + 1], prev + move[:k])
    return out


def expected_profile(env: Environment, n: int) -> MomentProfile:
    """``log E_omega[eta_n(x)]`` for ``x = 0..n`` via the two-branch recursion."""
    row = log_moment_lattice(env, n)[n]
    return MomentProfile(n=n, log_values=row, env_ref=_env_ref(env))


def expected_total(env: Environment, n: int) -> float:
    """``log E_omega[Z_n]``."""
    return expected_profile(env, n).log_total


def _env_ref(env: Environment) -> str:
    return f"{env.law_id}:{env.seed}" if env.seed is not None else env.law_id


def log_moment_upper_bound(env: Environment, n: int) -> np.ndarray:
    """Binomial bound ``log C(n,y) + (n-y) log Lambda_n + y log M_n``.

    The extremes are taken over the sites the first ``n`` generations can
    reach, which makes the bound hold for every realized environment.
    """
    m = env.mean[: max(n, 1)]
    h = env.drift[: max(n, 1)]
    lam, top = float(np.max(m * (1.0 - h))), float(np.max(m))
    y = np.arange(n + 1)
    logc = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        stay = np.where(n - y == 0, 0.0, (n - y) * np.log(lam))
        move = np.where(y == 0, 0.0, y * np.log(top))
    return logc + stay + move


def feynman_kac_total(env: Environment, n: int, walkers: int, seed: int) -> tuple[float, float]:
    """Estimate ``log E_omega[Z_n]`` as ``log E[prod_i m(S_i)]`` over delayed walks.

    Returns ``(log of sample mean, delta-method standard error of the log)``.
    """
    if walkers < 1:
        raise ValueError("walkers must be >= 1")
    if len(env) < n + 1:
        raise ValueError(f"environment has {len(env)} sites, need {n + 1}")
    rng = generator(seed, TAG_WALK)
    logm = np.log(env.mean)
    h = env.drift
    pos = np.zeros(walkers, dtype=np.int64)
    logw = np.zeros(walkers)
    for _ in range(n):
        logw += logm[pos]
        pos += rng.random(walkers) < h[pos]
    top = logw.max()
    w = np.exp(logw - top)
    mean = w.mean()
    if walkers > 1:
        se = float(w.std(ddof=1) / (mean * math.sqrt(walkers)))
    else:
        se = 0.0
    return float(top + math.log(mean)), se


def _lattice_site(x: float, n: int) -> int:
    site = int(math.floor(x * n + 1e-9))
    if abs(site / n - x) > 1.0 / n:
        warnings.warn(f"grid point {x} is far from lattice site {site}/{n}", stacklevel=3)
    return site


def _beta_replica(law: EnvironmentLaw, sites: np.ndarray, n: int, seed: int, r: int) -> np.ndarray:
    env = sample_environment(law, n + 1, derive_seed(seed, TAG_ENVIRONMENT, r))
    row = log_moment_lattice(env, n)[n]
    return row[sites] / n


def estimate_beta(law: EnvironmentLaw, grid: Sequence[float], n: int, replicas: int, seed: int,
                  workers: int | None = None) -> GrowthProfile:
    """Finite-``n`` estimate of the growth profile on ``grid``.

    Each replica draws a fresh environment and evaluates
    ``(1/n) log E_omega[eta_n(floor(x n))]``; the profile reports the mean
    and the standard error across replicas.
    """
    report = validate_law(law)
    if not report.ok:
        raise InvalidLawError(report)
    if not report.strong_ok:
        raise InvalidLawError(ValidationReport(False, False, ["drift not strongly elliptic (h > 1-delta)"]))
    if n < 1:
        raise ValueError("n must be >= 1")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    xs = np.array(sorted(float(x) for x in grid))
    if xs.size == 0 or xs[0] <= 0 or xs[-1] > 1:
        raise ValueError("grid points must lie in (0, 1]")
    sites = np.array([_lattice_site(x, n) for x in xs])
    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda r: _beta_replica(law, sites, n, seed, r), range(replicas)))
    else:
        rows = [_beta_replica(law, sites, n, seed, r) for r in range(replicas)]
    vals = np.vstack(rows)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros_like(mean)
    return GrowthProfile(x=xs, beta_hat=mean, stderr=se, n_used=n, replicas=replicas)


def beta_bounds(law: EnvironmentLaw) -> tuple[float, float]:
    """A-priori band ``[2 log delta + log(1 - delta), log M]`` for beta."""
    d = law.delta
    top, _ = law_extremes(law)
    return 2 * math.log(d) + math.log1p(-d), math.log(top)


def beta_richardson(law: EnvironmentLaw, grid: Sequence[float], n: int, replicas: int, seed: int):
    """Estimates at ``n`` and ``2n`` plus their difference, as a convergence diagnostic."""
    coarse = estimate_beta(law, grid, n, replicas, seed)
    fine = estimate_beta(law, grid, 2 * n, replicas, seed)
    return coarse, fine, fine.beta_hat - coarse.beta_hat


def max_beta(profile: GrowthProfile, law: EnvironmentLaw) -> tuple[float, float]:
    """Maximize over the grid and the analytic endpoint ``beta(0) = log Lambda``.

    Ties go to the smaller ``x``.
    """
    if len(profile) == 0:
        raise ValueError("empty growth profile")
    _, lam = law_extremes(law)
    best_x, best = 0.0, (math.log(lam) if lam > 0 else -math.inf)
    for x, b in zip(profile.x, profile.beta_hat):
        if b > best:
            best_x, best = float(x), float(b)
    return best_x, best


def beta_at_one(law: EnvironmentLaw) -> float:
    """Analytic right endpoint ``E[log(m h)]`` of the growth profile."""
    if law.is_atomic:
        return math.fsum(a.weight * math.log(a.dist.mean * a.drift) for a in law.support_atoms)
    h = law.drift
    return math.fsum(
        p.density * integrate.quad(lambda m: math.log(m * h), p.lower, p.upper, epsabs=1e-12)[0]
        for p in law.support_pieces)
