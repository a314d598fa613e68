"""Monte Carlo simulation of the particle cloud and of the embedded
first-passage process.

Each generation every particle at site ``x`` is replaced by an offspring
count drawn from the site's law, and each child then steps to ``x + 1``
with probability ``h_x`` or stays. Counts are tracked per occupied site
only, so a replica costs O(occupied sites) per generation.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .env_law import (BERNOULLI_PAIR, EXPLICIT, GEOMETRIC, Environment, EnvironmentLaw, OffspringTable,
                      _draw_sites, check_law)
from .streams import (TAG_EMBEDDED, TAG_ENVIRONMENT, TAG_NOISE, default_workers, derive_seed, generator,
                      site_uniforms)

DEFAULT_CAP = 10**9
DEFAULT_THRESHOLD = 10**5
BLOCK = 8192
MIN_SURVIVORS = 10

PROXY_NOTE = ("alive at the horizon is an upper-bound proxy for survival; "
              "it converges to the survival probability from above as the horizon grows")


class InsufficientSurvivorsError(RuntimeError):
    pass


@dataclass
class ParticleField:
    counts: dict[int, int] = field(default_factory=lambda: {0: 1})
    generation: int = 0
    saturated: bool = False

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class Trajectory:
    totals: np.ndarray
    extinct_at: int | None = None
    saturated_at: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "Z_n", "saturated"])
        for n, z in enumerate(self.totals.tolist()):
            w.writerow([n, z, int(self.saturated_at is not None and n >= self.saturated_at)])
        return buf.getvalue()


@dataclass
class EmbeddedSample:
    xi: list[int]
    truncated: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "xi_j"])
        for j, v in enumerate(self.xi, start=1):
            w.writerow([j, v])
        return buf.getvalue()


@dataclass
class SurvivalEstimate:
    estimate: float
    ci: tuple[float, float]
    alive: int
    replicas: int
    horizon: int
    mode: str
    proxy_note: str = PROXY_NOTE


@dataclass
class GrowthRateResult:
    rates: np.ndarray
    mean: float
    stderr: float
    survivors: int
    replicas: int
    insufficient: bool


# -- kernels ---------------------------------------------------------------

def offspring_totals(table: OffspringTable, rows: np.ndarray, counts: np.ndarray,
                     rng: np.random.Generator, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """Sum of ``counts[i]`` independent draws from distribution ``rows[i]``.

    Exact up to ``threshold`` parents per entry; above it the sum is a
    rounded normal with matching mean and variance, clamped at zero.
    """
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros_like(counts)
    if counts.size == 0:
        return out
    kind = table.kind[rows]
    big = counts > threshold
    exact = ~big & (counts > 0)

    sel = exact & (kind == BERNOULLI_PAIR)
    if sel.any():
        r = rows[sel]
        out[sel] = table.k[r] * rng.binomial(counts[sel], 1.0 - table.p0[r])

    sel = exact & (kind == GEOMETRIC)
    if sel.any():
        out[sel] = rng.negative_binomial(counts[sel], table.p0[rows[sel]])

    sel = exact & (kind == EXPLICIT)
    if sel.any():
        pmf = table.pmf[table.pmf_row[rows[sel]]]
        tail = np.cumsum(pmf[:, ::-1], axis=1)[:, ::-1]
        left = counts[sel].copy()
        acc = np.zeros_like(left)
        for j in range(pmf.shape[1]):
            live = left > 0
            if not live.any():
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(tail[:, j] > 0, pmf[:, j] / tail[:, j], 0.0)
            b = np.zeros_like(left)
            b[live] = rng.binomial(left[live], np.clip(q[live], 0.0, 1.0))
            acc += j * b
            left -= b
        out[sel] = acc

    if big.any():
        r = rows[big]
        c = counts[big].astype(float)
        draw = rng.normal(c * table.mean[r], np.sqrt(c * table.var[r]))
        out[big] = np.maximum(np.rint(draw), 0).astype(np.int64)
    return out


def _movers(offspring: np.ndarray, h: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    movers = np.where(h >= 1.0, offspring, 0)
    sel = (h > 0) & (h < 1.0) & (offspring > 0)
    if sel.any():
        movers[sel] = rng.binomial(offspring[sel], h[sel])
    return movers


def _advance(rep, site, count, table, index, drift, rng, threshold):
    """One generation for sparse entries ``(replica, site, count)`` sorted by (replica, site)."""
    rows = index[rep, site]
    off = offspring_totals(table, rows, count, rng, threshold)
    mov = _movers(off, drift[rep, site], rng)
    stay = off - mov
    width = index.shape[1] + 1
    key = rep * width + site
    # movers from entry i land on entry i+1 when that is the next site of the same replica
    hit = np.zeros(key.size, dtype=bool)
    hit[:-1] = key[1:] == key[:-1] + 1
    stay[1:] += np.where(hit[:-1], mov[:-1], 0)
    keys = np.empty(2 * key.size, dtype=np.int64)
    cnts = np.empty(2 * key.size, dtype=np.int64)
    keys[0::2], keys[1::2] = key, key + 1
    cnts[0::2], cnts[1::2] = stay, np.where(hit, 0, mov)
    keep = cnts > 0
    keys, cnts = keys[keep], cnts[keep]
    return keys // width, keys % width, cnts


@dataclass
class _BatchResult:
    alive: np.ndarray
    extinct_at: np.ndarray
    saturated_at: np.ndarray
    totals: np.ndarray | None
    fields: np.ndarray | None


def _simulate_batch(table, index, drift, horizon, cap, rng, threshold,
                    record_totals=False, keep_fields=False) -> _BatchResult:
    """Run ``index.shape[0]`` independent replicas from one particle at 0.

    ``extinct_at`` / ``saturated_at`` are ``-1`` when the event did not occur.
    """
    R = index.shape[0]
    if index.shape[1] < horizon + 1:
        raise ValueError(f"environment covers {index.shape[1]} sites, need {horizon + 1}")
    rep = np.arange(R, dtype=np.int64)
    site = np.zeros(R, dtype=np.int64)
    count = np.ones(R, dtype=np.int64)
    extinct_at = np.full(R, -1, dtype=np.int64)
    saturated_at = np.full(R, -1, dtype=np.int64)
    totals = np.zeros((R, horizon + 1), dtype=np.int64) if record_totals else None
    if record_totals:
        totals[:, 0] = 1
    for n in range(1, horizon + 1):
        if rep.size == 0:
            break
        active = np.unique(rep)
        rep, site, count = _advance(rep, site, count, table, index, drift, rng, threshold)
        if site.size and site.max() > n:
            raise AssertionError("particle beyond site n after n generations")
        z = np.bincount(rep, weights=count, minlength=R).astype(np.int64)
        if record_totals:
            totals[active, n] = z[active]
        died = active[z[active] == 0]
        extinct_at[died] = n
        over = active[z[active] > cap]
        if over.size:
            saturated_at[over] = n
            drop = np.isin(rep, over)
            rep, site, count = rep[~drop], site[~drop], count[~drop]
    fields = None
    if keep_fields:
        fields = np.zeros((R, horizon + 1), dtype=np.int64)
        fields[rep, site] = count
    return _BatchResult(alive=extinct_at < 0, extinct_at=extinct_at, saturated_at=saturated_at,
                        totals=totals, fields=fields)


# -- single trajectories ---------------------------------------------------

def step(field: ParticleField, env: Environment, rng: np.random.Generator,
         cap: int = DEFAULT_CAP, threshold: int = DEFAULT_THRESHOLD) -> ParticleField:
    """Branch every particle, then move its children right with the site drift."""
    if not field.counts:
        return ParticleField({}, field.generation + 1, field.saturated)
    sites = np.array(sorted(field.counts), dtype=np.int64)
    counts = np.array([field.counts[s] for s in sites], dtype=np.int64)
    if sites.max() >= len(env):
        raise ValueError("environment does not cover the occupied sites")
    index = env.index[None, :]
    drift = env.drift[None, :]
    rep = np.zeros(sites.size, dtype=np.int64)
    _, new_sites, new_counts = _advance(rep, sites, counts, env.table, index, drift, rng, threshold)
    nxt = {int(s): int(c) for s, c in zip(new_sites, new_counts)}
    gen = field.generation + 1
    assert all(s <= gen for s in nxt), "particle beyond site n after n generations"
    return ParticleField(nxt, gen, field.saturated or sum(nxt.values()) > cap)


def run(env: Environment, horizon: int, cap: int = DEFAULT_CAP, rng: np.random.Generator | None = None,
        threshold: int = DEFAULT_THRESHOLD) -> Trajectory:
    """Simulate from one particle at the origin until ``horizon``, extinction or saturation."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    rng = rng if rng is not None else generator(0, TAG_NOISE)
    res = _simulate_batch(env.table, env.index[None, :], env.drift[None, :], horizon, cap, rng,
                          threshold, record_totals=True)
    tot = res.totals[0]
    ext = int(res.extinct_at[0])
    sat = int(res.saturated_at[0])
    if sat >= 0:
        tot = tot[: sat + 1]
    return Trajectory(totals=tot, extinct_at=ext if ext >= 0 else None, saturated_at=sat if sat >= 0 else None)


def bpre_totals(env: Environment, horizon: int, rng: np.random.Generator,
                threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """Branching process in random environment: generation ``n`` breeds with site ``n``'s law."""
    z = np.zeros(horizon + 1, dtype=np.int64)
    z[0] = 1
    for n in range(horizon):
        if z[n] == 0:
            break
        z[n + 1] = offspring_totals(env.table, env.index[[n]], z[[n]], rng, threshold)[0]
    return z


# -- replica batches -------------------------------------------------------

def _environment_block(law: EnvironmentLaw, seed: int, start: int, stop: int, length: int):
    u = np.vstack([site_uniforms(derive_seed(seed, TAG_ENVIRONMENT, r), 0, length, TAG_ENVIRONMENT)
                   for r in range(start, stop)])
    return _draw_sites(law, u)


def _run_blocks(source, horizon, replicas, seed, cap, threshold, workers, record_totals=False,
                keep_fields=False) -> list[_BatchResult]:
    if isinstance(source, Environment):
        if len(source) < horizon + 1:
            raise ValueError(f"environment covers {len(source)} sites, need {horizon + 1}")
    else:
        check_law(source, strict=False)

    def block(b):
        start, stop = b * BLOCK, min(replicas, (b + 1) * BLOCK)
        if isinstance(source, Environment):
            n = stop - start
            table = source.table
            index = np.broadcast_to(source.index[: horizon + 1], (n, horizon + 1))
            drift = np.broadcast_to(source.drift[: horizon + 1], (n, horizon + 1))
        else:
            table, index, drift = _environment_block(source, seed, start, stop, horizon + 1)
        rng = generator(seed, TAG_NOISE, b)
        return _simulate_batch(table, index, drift, horizon, cap, rng, threshold, record_totals, keep_fields)

    nblocks = -(-replicas // BLOCK)
    workers = workers or default_workers()
    if workers > 1 and nblocks > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(block, range(nblocks)))
    return [block(b) for b in range(nblocks)]


def survival_probability(law: EnvironmentLaw | Environment, horizon: int, replicas: int, seed: int,
                         cap: int = DEFAULT_CAP, threshold: int = DEFAULT_THRESHOLD,
                         workers: int | None = None) -> SurvivalEstimate:
    """Fraction of replicas alive at ``horizon`` with a 95% Wilson interval.

    A law re-samples the environment for every replica (annealed); an
    :class:`Environment` is held fixed (quenched). Replicas that hit the
    population cap count as alive.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    blocks = _run_blocks(law, horizon, replicas, seed, cap, threshold, workers)
    alive = int(sum(int(b.alive.sum()) for b in blocks))
    lo, hi = proportion_confint(alive, replicas, alpha=0.05, method="wilson")
    mode = "quenched" if isinstance(law, Environment) else "annealed"
    return SurvivalEstimate(alive / replicas, (float(lo), float(hi)), alive, replicas, horizon, mode)


def simulate_fields(env: Environment, horizon: int, replicas: int, seed: int,
                    threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """Per-replica particle counts ``eta_horizon(x)`` in a fixed environment, shape (replicas, horizon+1)."""
    blocks = _run_blocks(env, horizon, replicas, seed, cap=np.iinfo(np.int64).max // 4,
                         threshold=threshold, workers=None, keep_fields=True)
    return np.vstack([b.fields for b in blocks])


def _growth_window_slope(tot: np.ndarray, last: int) -> float | None:
    first = last // 2
    if last - first < 1:
        return None
    n = np.arange(first, last + 1)
    return float(np.polyfit(n, np.log(tot[first:last + 1].astype(float)), 1)[0])


def empirical_growth_rate(law: EnvironmentLaw | Environment, horizon: int, replicas: int, seed: int,
                          cap: int = DEFAULT_CAP, threshold: int = DEFAULT_THRESHOLD,
                          workers: int | None = None) -> GrowthRateResult:
    """Least-squares slope of ``log Z_n`` for every surviving replica.

    The fit uses the second half ``[last/2, last]`` of the exactly simulated
    generations, where ``last`` is the horizon or the generation before the
    population cap was crossed.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    blocks = _run_blocks(law, horizon, replicas, seed, cap, threshold, workers, record_totals=True)
    rates = []
    survivors = 0
    for b in blocks:
        for i in np.flatnonzero(b.alive):
            survivors += 1
            sat = int(b.saturated_at[i])
            last = horizon if sat < 0 else sat - 1
            slope = _growth_window_slope(b.totals[i], last)
            if slope is not None:
                rates.append(slope)
    if survivors == 0:
        raise InsufficientSurvivorsError(f"no replica out of {replicas} survived to generation {horizon}")
    rates = np.array(rates)
    mean = float(rates.mean()) if rates.size else math.nan
    se = float(rates.std(ddof=1) / math.sqrt(rates.size)) if rates.size > 1 else 0.0
    return GrowthRateResult(rates, mean, se, survivors, replicas, insufficient=rates.size < MIN_SURVIVORS)


# -- embedded first-passage process ----------------------------------------

@dataclass
class EmbeddedBatch:
    """``xi[r, j-1]`` is stage ``j`` of run ``r``; ``-1`` after a truncated stage."""

    xi: np.ndarray
    truncated: np.ndarray

    def sample(self, r: int) -> EmbeddedSample:
        row = self.xi[r]
        done = row[row >= 0].tolist()
        return EmbeddedSample(done, bool(self.truncated[r]))


def _embedded_batch(env: Environment, k: int, runs: int, rng: np.random.Generator, budget: int,
                    threshold: int) -> EmbeddedBatch:
    if len(env) < k:
        raise ValueError(f"environment covers {len(env)} sites, need {k}")
    xi = np.full((runs, k), -1, dtype=np.int64)
    truncated = np.zeros(runs, dtype=bool)
    frozen = np.ones(runs, dtype=np.int64)
    for j in range(k):
        row = env.index[j]
        h = env.drift[j]
        pop = np.where(truncated, 0, frozen)
        arrived = np.zeros(runs, dtype=np.int64)
        gens = 0
        live = np.flatnonzero(pop > 0)
        while live.size:
            if gens >= budget:
                truncated[live] = True
                break
            off = offspring_totals(env.table, np.full(live.size, row), pop[live], rng, threshold)
            mov = _movers(off, np.full(live.size, h), rng)
            arrived[live] += mov
            pop[live] = off - mov
            live = live[pop[live] > 0]
            gens += 1
        ok = ~truncated
        xi[ok, j] = arrived[ok]
        frozen = arrived
    return EmbeddedBatch(xi, truncated)


def embedded_first_passage(env: Environment, k: int, rng: np.random.Generator, budget: int = 10**6,
                           threshold: int = DEFAULT_THRESHOLD) -> EmbeddedSample:
    """First-arrival counts ``xi_1..xi_k``.

    Stage ``j`` releases the ``xi_{j-1}`` particles frozen at site ``j-1``
    and lets the local population there run until it dies out; every child
    that steps to ``j`` is frozen and counted in ``xi_j``. A stage that needs
    more than ``budget`` generations is abandoned and the sample truncated.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    return _embedded_batch(env, k, 1, rng, budget, threshold).sample(0)


def sample_embedded(env: Environment, k: int, runs: int, seed: int, budget: int = 10**6,
                    threshold: int = DEFAULT_THRESHOLD) -> EmbeddedBatch:
    """Many independent embedded-process runs, vectorized over runs."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    return _embedded_batch(env, k, runs, generator(seed, TAG_EMBEDDED), budget, threshold)
