"""Offspring distributions, environment laws and realized environments."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .streams import TAG_ENVIRONMENT, normalize_seed, site_uniforms

PMF_TOL = 1e-12
WEIGHT_TOL = 1e-12
DEFAULT_DELTA = 0.05

EXPLICIT, GEOMETRIC, BERNOULLI_PAIR = 0, 1, 2
_KIND_CODES = {"explicit": EXPLICIT, "geometric": GEOMETRIC, "bernoulli_pair": BERNOULLI_PAIR}


class InvalidLawError(ValueError):
    """Raised when an operation needs a law that passes validation."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("; ".join(report.violations) or "invalid law")


@dataclass(frozen=True)
class OffspringDistribution:
    """A law on {0, 1, 2, ...} with finite mean.

    Build instances with :meth:`explicit`, :meth:`geometric` or
    :meth:`bernoulli_pair`; the raw constructor does no normalization.
    """

    kind: str
    pmf: tuple[float, ...] = ()
    geometric_mean: float = 0.0
    p0: float = 0.0
    k: int = 0

    def __post_init__(self):
        if self.kind == "explicit":
            p = np.asarray(self.pmf, dtype=float)
            if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > PMF_TOL:
                raise ValueError(f"pmf must be nonnegative and sum to 1, got {self.pmf}")
        elif self.kind == "geometric":
            if not (math.isfinite(self.geometric_mean) and self.geometric_mean > 0):
                raise ValueError("geometric mean must be a finite positive number")
        elif self.kind == "bernoulli_pair":
            if not (0.0 <= self.p0 <= 1.0) or int(self.k) < 1:
                raise ValueError("bernoulli_pair needs p0 in [0, 1] and k >= 1")
        else:
            raise ValueError(f"unknown offspring kind {self.kind!r}")

    @classmethod
    def explicit(cls, pmf: Sequence[float]) -> "OffspringDistribution":
        return cls("explicit", pmf=tuple(float(v) for v in pmf))

    @classmethod
    def geometric(cls, mean: float) -> "OffspringDistribution":
        return cls("geometric", geometric_mean=float(mean))

    @classmethod
    def bernoulli_pair(cls, p0: float, k: int) -> "OffspringDistribution":
        """Zero children with probability ``p0``, otherwise exactly ``k``."""
        return cls("bernoulli_pair", p0=float(p0), k=int(k))

    @cached_property
    def mean(self) -> float:
        if self.kind == "explicit":
            return float(np.dot(np.arange(len(self.pmf)), self.pmf))
        if self.kind == "geometric":
            return self.geometric_mean
        return (1.0 - self.p0) * self.k

    @cached_property
    def variance(self) -> float:
        if self.kind == "explicit":
            j = np.arange(len(self.pmf))
            return float(np.dot(j * j, self.pmf) - self.mean**2)
        if self.kind == "geometric":
            m = self.geometric_mean
            return m * (1.0 + m)
        return self.k * self.k * self.p0 * (1.0 - self.p0)

    @property
    def prob_zero(self) -> float:
        if self.kind == "explicit":
            return self.pmf[0]
        if self.kind == "geometric":
            return 1.0 / (1.0 + self.geometric_mean)
        return self.p0

    @property
    def prob_one(self) -> float:
        if self.kind == "explicit":
            return self.pmf[1] if len(self.pmf) > 1 else 0.0
        if self.kind == "geometric":
            m = self.geometric_mean
            return m / (1.0 + m) ** 2
        return 1.0 - self.p0 if self.k == 1 else 0.0

    def to_dict(self) -> dict:
        if self.kind == "explicit":
            return {"pmf": list(self.pmf)}
        if self.kind == "geometric":
            return {"geometric_mean": self.geometric_mean}
        return {"bernoulli_pair": {"p0": self.p0, "k": self.k}}


@dataclass(frozen=True)
class MeanFamily:
    """Maps a target mean to an offspring distribution (used by density laws)."""

    kind: str = "bernoulli_pair"
    k: int = 2

    def __post_init__(self):
        if self.kind not in ("bernoulli_pair", "geometric"):
            raise ValueError(f"unsupported mean family {self.kind!r}")

    def supports(self, mean: float) -> bool:
        if self.kind == "bernoulli_pair":
            return 0.0 <= mean <= self.k
        return mean > 0

    def prob_zero(self, mean):
        mean = np.asarray(mean, dtype=float)
        if self.kind == "bernoulli_pair":
            return 1.0 - mean / self.k
        return 1.0 / (1.0 + mean)

    def __call__(self, mean: float) -> OffspringDistribution:
        if not self.supports(mean):
            raise ValueError(f"mean {mean} outside the range of family {self.kind}")
        if self.kind == "bernoulli_pair":
            return OffspringDistribution.bernoulli_pair(1.0 - mean / self.k, self.k)
        return OffspringDistribution.geometric(mean)

    def table(self, means: np.ndarray) -> "OffspringTable":
        means = np.asarray(means, dtype=float).ravel()
        n = means.size
        if self.kind == "bernoulli_pair":
            p0 = 1.0 - means / self.k
            return OffspringTable(
                kind=np.full(n, BERNOULLI_PAIR, dtype=np.int8),
                mean=means,
                var=self.k * self.k * p0 * (1.0 - p0),
                p0=p0,
                k=np.full(n, self.k, dtype=np.int64),
                pmf_row=np.full(n, -1, dtype=np.int64),
                pmf=np.zeros((0, 1)),
            )
        return OffspringTable(
            kind=np.full(n, GEOMETRIC, dtype=np.int8),
            mean=means,
            var=means * (1.0 + means),
            p0=1.0 / (1.0 + means),
            k=np.zeros(n, dtype=np.int64),
            pmf_row=np.full(n, -1, dtype=np.int64),
            pmf=np.zeros((0, 1)),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k} if self.kind == "bernoulli_pair" else {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class OffspringTable:
    """Column-wise parameters for a set of offspring distributions.

    ``pmf`` holds only explicit distributions; ``pmf_row`` points into it
    (``-1`` for the parametric kinds).
    """

    kind: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    p0: np.ndarray
    k: np.ndarray
    pmf_row: np.ndarray
    pmf: np.ndarray

    @classmethod
    def from_distributions(cls, dists: Sequence[OffspringDistribution]) -> "OffspringTable":
        explicit = [d for d in dists if d.kind == "explicit"]
        width = max([len(d.pmf) for d in explicit], default=1)
        pmf = np.zeros((len(explicit), width))
        pmf_row = np.full(len(dists), -1, dtype=np.int64)
        r = 0
        for i, d in enumerate(dists):
            if d.kind == "explicit":
                pmf[r, : len(d.pmf)] = d.pmf
                pmf_row[i] = r
                r += 1
        return cls(
            kind=np.array([_KIND_CODES[d.kind] for d in dists], dtype=np.int8),
            mean=np.array([d.mean for d in dists], dtype=float),
            var=np.array([d.variance for d in dists], dtype=float),
            p0=np.array([d.prob_zero for d in dists], dtype=float),
            k=np.array([d.k for d in dists], dtype=np.int64),
            pmf_row=pmf_row,
            pmf=pmf,
        )

    def __len__(self) -> int:
        return len(self.kind)

    def distribution(self, row: int) -> OffspringDistribution:
        code = int(self.kind[row])
        if code == EXPLICIT:
            p = self.pmf[self.pmf_row[row]]
            last = np.flatnonzero(p)[-1] if np.any(p) else 0
            return OffspringDistribution.explicit(p[: last + 1])
        if code == GEOMETRIC:
            return OffspringDistribution.geometric(float(self.mean[row]))
        return OffspringDistribution.bernoulli_pair(float(self.p0[row]), int(self.k[row]))


@dataclass(frozen=True)
class LawAtom:
    dist: OffspringDistribution
    drift: float
    weight: float


@dataclass(frozen=True)
class DensityPiece:
    """Density ``density`` for the mean offspring on ``[lower, upper]``."""

    lower: float
    upper: float
    density: float

    @property
    def mass(self) -> float:
        return self.density * (self.upper - self.lower)


@dataclass(frozen=True)
class EnvironmentLaw:
    """The single-site law from which an i.i.d. environment is drawn.

    ``kind`` is ``"atomic"`` (a finite mixture of ``atoms``) or
    ``"density_constant_drift"`` (mean offspring with a piecewise-constant
    density, every site sharing ``drift``; the offspring law at a site is
    ``family(mean)``).
    """

    kind: str
    atoms: tuple[LawAtom, ...] = ()
    pieces: tuple[DensityPiece, ...] = ()
    drift: float = 1.0
    family: MeanFamily = field(default_factory=MeanFamily)
    delta: float = DEFAULT_DELTA

    @classmethod
    def atomic(cls, atoms: Iterable[LawAtom], delta: float = DEFAULT_DELTA) -> "EnvironmentLaw":
        return cls("atomic", atoms=tuple(atoms), delta=float(delta))

    @classmethod
    def deterministic(cls, dist: OffspringDistribution, drift: float, delta: float = DEFAULT_DELTA):
        return cls.atomic([LawAtom(dist, float(drift), 1.0)], delta=delta)

    @classmethod
    def density(cls, pieces: Iterable[DensityPiece], drift: float,
                family: MeanFamily | None = None, delta: float = DEFAULT_DELTA) -> "EnvironmentLaw":
        return cls("density_constant_drift", pieces=tuple(pieces), drift=float(drift),
                   family=family or MeanFamily(), delta=float(delta))

    def __post_init__(self):
        if self.kind not in ("atomic", "density_constant_drift"):
            raise ValueError(f"unknown law kind {self.kind!r}")

    @property
    def is_atomic(self) -> bool:
        return self.kind == "atomic"

    @property
    def support_atoms(self) -> tuple[LawAtom, ...]:
        return tuple(a for a in self.atoms if a.weight > 0)

    @property
    def support_pieces(self) -> tuple[DensityPiece, ...]:
        return tuple(p for p in self.pieces if p.density > 0 and p.upper > p.lower)

    def with_drift(self, h: float) -> "EnvironmentLaw":
        """Same offspring law, every site drifting with probability ``h``."""
        if self.is_atomic:
            return EnvironmentLaw.atomic(
                [LawAtom(a.dist, float(h), a.weight) for a in self.atoms], delta=self.delta)
        return EnvironmentLaw.density(self.pieces, float(h), self.family, self.delta)

    @cached_property
    def atom_table(self) -> OffspringTable:
        return OffspringTable.from_distributions([a.dist for a in self.atoms])

    def to_dict(self) -> dict:
        if self.is_atomic:
            return {
                "kind": "atomic",
                "atoms": [{**a.dist.to_dict(), "drift": a.drift, "weight": a.weight} for a in self.atoms],
                "delta": self.delta,
            }
        return {
            "kind": "density_constant_drift",
            "pieces": [{"interval": [p.lower, p.upper], "density": p.density} for p in self.pieces],
            "drift": self.drift,
            "family": self.family.to_dict(),
            "delta": self.delta,
        }

    @cached_property
    def law_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def two_point_law(q: float, m_plus: float, m_minus: float, drift: float,
                  family: MeanFamily | None = None, delta: float = DEFAULT_DELTA) -> EnvironmentLaw:
    """Mean ``m_plus`` with probability ``q``, else ``m_minus``; constant drift."""
    family = family or MeanFamily()
    return EnvironmentLaw.atomic(
        [LawAtom(family(m_plus), drift, q), LawAtom(family(m_minus), drift, 1.0 - q)], delta=delta)


@dataclass
class ValidationReport:
    ok: bool
    strong_ok: bool
    violations: list[str]
    notes: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _structural_violations(law: EnvironmentLaw) -> list[str]:
    out = []
    if law.is_atomic:
        if not law.atoms:
            out.append("law has no atoms")
        if any(a.weight < 0 or a.weight > 1 for a in law.atoms):
            out.append("atom weight outside [0, 1]")
        total = math.fsum(a.weight for a in law.atoms)
        if abs(total - 1.0) > WEIGHT_TOL:
            out.append(f"atom weights sum to {total!r}, not 1")
        for i, a in enumerate(law.atoms):
            if not math.isfinite(a.dist.mean):
                out.append(f"atom {i}: infinite mean")
            if not (0.0 <= a.drift <= 1.0):
                out.append(f"atom {i}: drift {a.drift} is not a probability")
    else:
        if not law.pieces:
            out.append("law has no density pieces")
        for i, p in enumerate(law.pieces):
            if not (p.upper > p.lower) or p.density < 0:
                out.append(f"piece {i}: needs lower < upper and density >= 0")
            elif p.density > 0 and not (law.family.supports(p.lower) and law.family.supports(p.upper)):
                out.append(f"piece {i}: means outside the range of family {law.family.kind}")
        total = math.fsum(p.mass for p in law.pieces)
        if abs(total - 1.0) > WEIGHT_TOL:
            out.append(f"density integrates to {total!r}, not 1")
        if not (0.0 <= law.drift <= 1.0):
            out.append(f"drift {law.drift} is not a probability")
    return out


def validate_law(law: EnvironmentLaw) -> ValidationReport:
    """Check both ellipticity conditions for the declared ``law.delta``.

    ``ok`` covers the weak condition (death probability at most ``1 - delta``,
    drift in ``[delta, 1]``, branching not a.s. trivial); ``strong_ok``
    additionally requires drift at most ``1 - delta``.
    """
    violations = _structural_violations(law)
    delta = law.delta
    strong = True
    if not (0.0 < delta < 0.5):
        violations.append(f"delta {delta} outside (0, 1/2)")
    if law.is_atomic:
        support = [(i, a) for i, a in enumerate(law.atoms) if a.weight > 0]
        for i, a in support:
            if a.dist.prob_zero > 1.0 - delta + PMF_TOL:
                violations.append(f"atom {i}: death probability not elliptic (p0={a.dist.prob_zero:.6g} > 1-delta)")
            if not (delta - PMF_TOL <= a.drift <= 1.0):
                violations.append(f"atom {i}: drift not elliptic (h={a.drift:.6g} not in [delta, 1])")
            if a.drift > 1.0 - delta + PMF_TOL:
                strong = False
        if support and all(a.dist.prob_one >= 1.0 - PMF_TOL for _, a in support):
            violations.append("branching trivial (all mass on p1=1)")
    else:
        for i, p in enumerate(law.support_pieces):
            if law.family.supports(p.lower) and float(law.family.prob_zero(p.lower)) > 1.0 - delta + PMF_TOL:
                violations.append(f"piece {i}: death probability not elliptic near mean {p.lower}")
        if not (delta - PMF_TOL <= law.drift <= 1.0):
            violations.append(f"drift not elliptic (h={law.drift:.6g} not in [delta, 1])")
        if law.drift > 1.0 - delta + PMF_TOL:
            strong = False
    ok = not violations
    return ValidationReport(ok=ok, strong_ok=ok and strong, violations=violations)


def law_extremes(law: EnvironmentLaw) -> tuple[float, float]:
    """Essential suprema ``(M, Lambda)`` of the mean and of mean * (1 - drift)."""
    if law.is_atomic:
        atoms = law.support_atoms
        if not atoms:
            raise ValueError("law has no atoms of positive weight")
        return (max(a.dist.mean for a in atoms), max(a.dist.mean * (1.0 - a.drift) for a in atoms))
    pieces = law.support_pieces
    if not pieces:
        raise ValueError("law has no pieces of positive mass")
    top = max(p.upper for p in pieces)
    return top, top * (1.0 - law.drift)


@dataclass(frozen=True, eq=False)
class Environment:
    """A realized environment on sites ``0..length-1``.

    Site ``x`` uses offspring law ``table`` row ``index[x]`` and moves right
    with probability ``drift[x]``.
    """

    table: OffspringTable
    index: np.ndarray
    drift: np.ndarray
    seed: int | None = None
    law_id: str = "explicit"

    @classmethod
    def from_sites(cls, sites: Sequence[tuple[OffspringDistribution, float]], law_id: str = "explicit"):
        dists = list({d: None for d, _ in sites})
        row = {d: i for i, d in enumerate(dists)}
        return cls(
            table=OffspringTable.from_distributions(dists),
            index=np.array([row[d] for d, _ in sites], dtype=np.int64),
            drift=np.array([h for _, h in sites], dtype=float),
            law_id=law_id,
        )

    @classmethod
    def homogeneous(cls, dist: OffspringDistribution, drift: float, length: int) -> "Environment":
        return cls(
            table=OffspringTable.from_distributions([dist]),
            index=np.zeros(length, dtype=np.int64),
            drift=np.full(length, float(drift)),
            law_id="homogeneous",
        )

    def __len__(self) -> int:
        return len(self.drift)

    @property
    def mean(self) -> np.ndarray:
        return self.table.mean[self.index]

    def site(self, x: int) -> tuple[OffspringDistribution, float]:
        return self.table.distribution(int(self.index[x])), float(self.drift[x])

    @property
    def sites(self) -> list[tuple[OffspringDistribution, float]]:
        return [self.site(x) for x in range(len(self))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean) and np.array_equal(self.drift, other.drift)
                and self.sites == other.sites)

    __hash__ = None


def _draw_sites(law: EnvironmentLaw, u: np.ndarray):
    """Map uniforms to ``(table, index, drift)`` for one or many environments."""
    if law.is_atomic:
        w = np.array([a.weight for a in law.atoms], dtype=float)
        cum = np.cumsum(w)
        cum /= cum[-1]
        idx = np.searchsorted(cum, u, side="right")
        # a uniform landing on the last edge must not select a trailing zero-weight atom
        last = int(np.flatnonzero(w > 0)[-1])
        idx = np.minimum(idx, last)
        drift = np.array([a.drift for a in law.atoms], dtype=float)[idx]
        return law.atom_table, idx.astype(np.int64), drift
    pieces = law.support_pieces
    masses = np.array([p.mass for p in pieces])
    cum = np.cumsum(masses)
    total = cum[-1]
    v = u * total
    j = np.minimum(np.searchsorted(cum, v, side="right"), len(pieces) - 1)
    start = np.concatenate([[0.0], cum[:-1]])[j]
    lo = np.array([p.lower for p in pieces])[j]
    hi = np.array([p.upper for p in pieces])[j]
    dens = np.array([p.density for p in pieces])[j] / total
    means = np.clip(lo + (v - start) / total / dens, lo, hi)
    table = law.family.table(means)
    index = np.arange(means.size, dtype=np.int64).reshape(np.shape(u))
    return table, index, np.full(np.shape(u), law.drift)


def sample_environment(law: EnvironmentLaw, length: int, seed: int, strict: bool = True) -> Environment:
    """Draw sites ``0..length-1`` i.i.d. from ``law``.

    Site ``x`` depends only on ``(law, seed, x)``. With ``strict`` the law
    must pass :func:`validate_law`; otherwise only structural soundness
    (weights and densities summing to one) is required, which lets the
    simulator run degenerate laws such as certain death.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    check_law(law, strict=strict)
    u = site_uniforms(seed, 0, length, TAG_ENVIRONMENT)
    table, index, drift = _draw_sites(law, u)
    return Environment(table=table, index=index, drift=drift, seed=normalize_seed(seed), law_id=law.law_id)


def check_law(law: EnvironmentLaw, strict: bool = True) -> None:
    if strict:
        report = validate_law(law)
        if not report.ok:
            raise InvalidLawError(report)
    else:
        problems = _structural_violations(law)
        if problems:
            raise InvalidLawError(ValidationReport(False, False, problems))
