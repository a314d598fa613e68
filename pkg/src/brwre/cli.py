"""Command-line front end.

Laws and environments are JSON documents; scalar knobs are flags. Every
artifact starts with ``#``-prefixed metadata lines (CSV) or a
``metadata`` object (JSON) recording the seed, the law hash and the knobs.

Exit status: 0 ok, 2 configuration error, 3 law validation failure,
4 runtime insufficiency (for example no surviving replica).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .criteria import (classify, critical_drifts, embedded_offspring_mean, regime_sweep)
from .env_law import (DensityPiece, Environment, EnvironmentLaw, InvalidLawError, LawAtom, MeanFamily,
                      OffspringDistribution, law_extremes, sample_environment, validate_law)
from .moments import beta_at_one, beta_richardson, estimate_beta, format_real, max_beta
from .particle_sim import (DEFAULT_CAP, InsufficientSurvivorsError, empirical_growth_rate, run,
                           sample_embedded, survival_probability)
from .streams import TAG_ENVIRONMENT, TAG_NOISE, derive_seed, generator

EXIT_OK, EXIT_CONFIG, EXIT_LAW, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("validate", "classify", "phi-sweep", "beta", "simulate", "embedded", "phase-diagram")


class ConfigError(ValueError):
    pass


class RuntimeInsufficiency(RuntimeError):
    pass


# -- law documents ---------------------------------------------------------

def _real(v, what: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{what}: expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{what}: expected a number or a rational string, got {v!r}")


def _check_keys(obj, allowed: set[str], what: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{what}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ConfigError(f"{what}: unknown keys {sorted(extra)}")


def _family(obj) -> MeanFamily:
    if obj is None:
        return MeanFamily()
    _check_keys(obj, {"kind", "k"}, "family")
    try:
        return MeanFamily(obj.get("kind", "bernoulli_pair"), int(obj.get("k", 2)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"family: {exc}") from None


_DIST_KEYS = {"pmf", "geometric_mean", "bernoulli_pair", "mean"}


def _dist(obj: dict, family: MeanFamily, what: str) -> OffspringDistribution:
    given = [k for k in _DIST_KEYS if k in obj]
    if len(given) != 1:
        raise ConfigError(f"{what}: exactly one of {sorted(_DIST_KEYS)} is required")
    key = given[0]
    try:
        if key == "pmf":
            if not isinstance(obj["pmf"], list):
                raise ConfigError(f"{what}: pmf must be a list")
            return OffspringDistribution.explicit([_real(v, f"{what}.pmf") for v in obj["pmf"]])
        if key == "geometric_mean":
            return OffspringDistribution.geometric(_real(obj[key], f"{what}.geometric_mean"))
        if key == "bernoulli_pair":
            bp = obj[key]
            _check_keys(bp, {"p0", "k"}, f"{what}.bernoulli_pair")
            return OffspringDistribution.bernoulli_pair(_real(bp["p0"], f"{what}.p0"), int(bp["k"]))
        return family(_real(obj["mean"], f"{what}.mean"))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{what}: {exc}") from None


def law_from_dict(doc: dict) -> EnvironmentLaw:
    """Map a law document to an :class:`EnvironmentLaw` (unknown keys rejected).

    Semantic checks such as ellipticity are left to ``validate_law``.
    """
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError("law document needs a 'kind'")
    kind = doc["kind"]
    delta = _real(doc.get("delta", 0.05), "delta")
    if kind == "atomic":
        _check_keys(doc, {"kind", "atoms", "delta", "family"}, "law")
        family = _family(doc.get("family"))
        atoms = doc.get("atoms")
        if not isinstance(atoms, list):
            raise ConfigError("atomic law needs a list 'atoms'")
        out = []
        for i, a in enumerate(atoms):
            what = f"atoms[{i}]"
            _check_keys(a, _DIST_KEYS | {"drift", "weight"}, what)
            if "drift" not in a:
                raise ConfigError(f"{what}: missing 'drift'")
            weight = _real(a.get("weight", 1.0), f"{what}.weight")
            out.append(LawAtom(_dist(a, family, what), _real(a["drift"], f"{what}.drift"), weight))
        return EnvironmentLaw.atomic(out, delta=delta)
    if kind == "density_constant_drift":
        _check_keys(doc, {"kind", "pieces", "drift", "family", "delta"}, "law")
        pieces = doc.get("pieces")
        if not isinstance(pieces, list) or "drift" not in doc:
            raise ConfigError("density law needs a list 'pieces' and a 'drift'")
        out = []
        for i, p in enumerate(pieces):
            what = f"pieces[{i}]"
            _check_keys(p, {"interval", "density"}, what)
            iv = p.get("interval")
            if not (isinstance(iv, list) and len(iv) == 2) or "density" not in p:
                raise ConfigError(f"{what}: needs 'interval' [a, b] and 'density'")
            out.append(DensityPiece(_real(iv[0], what), _real(iv[1], what), _real(p["density"], what)))
        return EnvironmentLaw.density(out, _real(doc["drift"], "drift"), _family(doc.get("family")), delta)
    raise ConfigError(f"unknown law kind {kind!r}")


def environment_from_dict(doc: dict) -> Environment:
    _check_keys(doc, {"kind", "sites", "family"}, "environment")
    family = _family(doc.get("family"))
    sites = doc.get("sites")
    if not isinstance(sites, list) or not sites:
        raise ConfigError("environment needs a non-empty list 'sites'")
    out = []
    for i, s in enumerate(sites):
        what = f"sites[{i}]"
        _check_keys(s, _DIST_KEYS | {"drift"}, what)
        if "drift" not in s:
            raise ConfigError(f"{what}: missing 'drift'")
        h = _real(s["drift"], f"{what}.drift")
        if not 0.0 <= h <= 1.0:
            raise ConfigError(f"{what}: drift must lie in [0, 1]")
        out.append((_dist(s, family, what), h))
    return Environment.from_sites(out, law_id="file")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None


def parse_law_file(path) -> EnvironmentLaw:
    return law_from_dict(_load_json(path))


def parse_source(path) -> EnvironmentLaw | Environment:
    doc = _load_json(path)
    if isinstance(doc, dict) and doc.get("kind") == "environment":
        return environment_from_dict(doc)
    return law_from_dict(doc)


# -- configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    source: str
    seed: int = 0
    out: str | None = None
    format: str | None = None
    n: int = 200
    horizon: int = 100
    replicas: int = 100
    grid: str = "0.1:1:10"
    h_grid: str = "0.01:1:100"
    tol: float = 1e-9
    cap: int = DEFAULT_CAP
    k: int = 10
    budget: int = 10**5
    runs: int = 1
    growth: bool = False
    richardson: bool = False

    def check(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.format not in (None, "csv", "json"):
            raise ConfigError("format must be csv or json")
        for name, low in (("n", 1), ("horizon", 0), ("replicas", 1), ("cap", 1), ("k", 1),
                          ("budget", 1), ("runs", 1)):
            if getattr(self, name) < low:
                raise ConfigError(f"--{name} must be >= {low}")
        if not self.tol > 0:
            raise ConfigError("--tol must be positive")

    def knobs(self) -> dict:
        used = {
            "validate": (), "classify": ("tol",), "phi-sweep": ("h_grid", "tol"),
            "phase-diagram": ("h_grid", "tol"), "beta": ("n", "replicas", "grid", "richardson"),
            "simulate": ("horizon", "replicas", "cap", "growth"), "embedded": ("k", "budget", "runs"),
        }[self.command]
        return {k: getattr(self, k) for k in used}


def parse_grid(spec: str, what: str) -> np.ndarray:
    """``a:b:steps`` (inclusive, evenly spaced) or a comma-separated list."""
    try:
        if ":" in spec:
            a, b, steps = spec.split(":")
            steps = int(steps)
            if steps < 1:
                raise ValueError
            return np.linspace(_real(a, what), _real(b, what), steps)
        return np.array([_real(v, what) for v in spec.split(",")])
    except (ValueError, ConfigError):
        raise ConfigError(f"{what}: cannot parse grid {spec!r}") from None


# -- output ----------------------------------------------------------------

@dataclass
class Artifact:
    columns: list[str]
    rows: list[list]
    summary: dict = field(default_factory=dict)
    json_data: object = None


def _token(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return format_real(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            raise ValueError("refusing to emit NaN")
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, np.integer):
        return int(v)
    return v


def render(art: Artifact, meta: dict, fmt: str) -> str:
    if fmt == "json":
        data = art.json_data if art.json_data is not None else [dict(zip(art.columns, r)) for r in art.rows]
        doc = {"metadata": meta, "data": data}
        if art.summary and art.json_data is not art.summary:
            doc["summary"] = art.summary
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}={json.dumps(_jsonable(meta[k]), sort_keys=True)}\n")
    for k in sorted(art.summary):
        buf.write(f"# summary.{k}={json.dumps(_jsonable(art.summary[k]), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(art.columns)
    for r in art.rows:
        w.writerow([_token(v) for v in r])
    return buf.getvalue()


# -- commands --------------------------------------------------------------

def _require_law(src) -> EnvironmentLaw:
    if isinstance(src, Environment):
        raise ConfigError("this command needs a law document, not an environment")
    return src


def _cmd_validate(cfg, law):
    rep = validate_law(law)
    summary = {"ok": rep.ok, "strong_ok": rep.strong_ok, "violations": rep.violations}
    if rep.ok:
        top, lam = law_extremes(law)
        summary.update(M=top, Lambda=lam)
    art = Artifact(["violation"], [[v] for v in rep.violations], summary, json_data=summary)
    return art, (EXIT_OK if rep.ok else EXIT_LAW)


def _checked(law):
    rep = validate_law(law)
    if not rep.ok:
        raise InvalidLawError(rep)
    return law


def _cmd_classify(cfg, law):
    _checked(law)
    c = classify(law)
    crit = critical_drifts(law, cfg.tol)
    top, lam = law_extremes(law)
    data = {"h_ls": crit.h_ls, "h_gs": crit.h_gs, "case": crit.theorem_case, "M": top, "Lambda": lam,
            "local": c.local, "global": c.global_, "gs_functional": c.gs_functional_value,
            "label": c.case_label, "phi_at_h_ls": crit.phi_at_h_ls, "phi_at_one": crit.phi_at_one}
    return Artifact(list(data), [list(data.values())], json_data=data), EXIT_OK


def _cmd_sweep(cfg, law, with_phi: bool):
    _checked(law)
    grid = parse_grid(cfg.h_grid, "--h-grid")
    if np.any(grid <= 0) or np.any(grid > 1):
        raise ConfigError("--h-grid values must lie in (0, 1]")
    rows, crit = regime_sweep(law, grid, cfg.tol)
    summary = {"h_ls": crit.h_ls, "h_gs": crit.h_gs, "case": crit.theorem_case}
    if with_phi:
        # phi is left undefined below h_LS
        table = [[h, ("undefined" if v is None else v), reg] for h, v, reg in rows]
        return Artifact(["h", "phi", "regime"], table, summary), EXIT_OK
    return Artifact(["h", "regime"], [[h, reg] for h, _, reg in rows], summary), EXIT_OK


def _cmd_beta(cfg, law):
    _checked(law)
    grid = parse_grid(cfg.grid, "--grid")
    if cfg.richardson:
        coarse, prof, diff = beta_richardson(law, grid, cfg.n, cfg.replicas, cfg.seed)
    else:
        prof = estimate_beta(law, grid, cfg.n, cfg.replicas, cfg.seed)
    x_star, b_star = max_beta(prof, law)
    _, lam = law_extremes(law)
    summary = {"x_star": x_star, "beta_star": b_star, "beta_0": math.log(lam) if lam > 0 else -math.inf,
               "beta_1_analytic": beta_at_one(law), "n": prof.n_used, "replicas": prof.replicas}
    cols = ["x", "beta_hat", "stderr"]
    rows = [list(r) for r in prof.grid]
    if cfg.richardson:
        cols.append("diff_vs_half_n")
        rows = [r + [float(d)] for r, d in zip(rows, diff)]
    return Artifact(cols, rows, summary), EXIT_OK


def _cmd_simulate(cfg, src):
    if cfg.replicas == 1:
        if isinstance(src, Environment):
            env = src
        else:
            env = sample_environment(src, cfg.horizon + 1, derive_seed(cfg.seed, TAG_ENVIRONMENT, 0), strict=False)
        traj = run(env, cfg.horizon, cfg.cap, generator(cfg.seed, TAG_NOISE, 0))
        summary = {"extinct_at": traj.extinct_at, "saturated_at": traj.saturated_at}
        rows = [[n, int(z), int(traj.saturated_at is not None and n >= traj.saturated_at)]
                for n, z in enumerate(traj.totals)]
        return Artifact(["n", "Z_n", "saturated"], rows, summary), EXIT_OK
    est = survival_probability(src, cfg.horizon, cfg.replicas, cfg.seed, cfg.cap)
    cols = ["estimate", "ci_low", "ci_high", "alive", "replicas", "horizon", "mode"]
    row = [est.estimate, est.ci[0], est.ci[1], est.alive, est.replicas, est.horizon, est.mode]
    summary = {"proxy_note": est.proxy_note}
    if cfg.growth:
        try:
            g = empirical_growth_rate(src, cfg.horizon, cfg.replicas, cfg.seed, cfg.cap)
        except InsufficientSurvivorsError as exc:
            raise RuntimeInsufficiency(str(exc)) from None
        if g.rates.size == 0:
            raise RuntimeInsufficiency("no survivor has a usable pre-saturation window")
        cols += ["growth_rate_mean", "growth_rate_stderr", "survivors", "insufficient"]
        row += [g.mean, g.stderr, g.survivors, g.insufficient]
    return Artifact(cols, [row], summary), EXIT_OK


def _cmd_embedded(cfg, src):
    if isinstance(src, Environment):
        env = src
    else:
        env = sample_environment(_checked(src), cfg.k, derive_seed(cfg.seed, TAG_ENVIRONMENT, 0))
    if len(env) < cfg.k:
        raise ConfigError(f"environment has {len(env)} sites, --k needs {cfg.k}")
    batch = sample_embedded(env, cfg.k, cfg.runs, cfg.seed, cfg.budget)
    summary = {"truncated_runs": int(batch.truncated.sum())}
    if cfg.runs == 1:
        s = batch.sample(0)
        summary["truncated"] = s.truncated
        return Artifact(["j", "xi_j"], [[j, v] for j, v in enumerate(s.xi, start=1)], summary), EXIT_OK
    rows = []
    for j in range(cfg.k):
        col = batch.xi[:, j]
        done = col[col >= 0].astype(float)
        mean = float(done.mean()) if done.size else math.nan
        se = float(done.std(ddof=1) / math.sqrt(done.size)) if done.size > 1 else 0.0
        if math.isnan(mean):
            break
        rows.append([j + 1, mean, se, int(done.size), embedded_offspring_mean(env.site(j))])
    return Artifact(["j", "mean_xi_j", "stderr", "runs_completed", "site_embedded_mean"], rows,
                    summary), EXIT_OK


def run_command(cfg: RunConfig) -> tuple[int, str]:
    """Execute one command; returns ``(exit status, rendered artifact or reason line)``."""
    try:
        cfg.check()
        src = parse_source(cfg.source)
        if cfg.command == "validate":
            art, status = _cmd_validate(cfg, _require_law(src))
        elif cfg.command == "classify":
            art, status = _cmd_classify(cfg, _require_law(src))
        elif cfg.command == "phi-sweep":
            art, status = _cmd_sweep(cfg, _require_law(src), with_phi=True)
        elif cfg.command == "phase-diagram":
            art, status = _cmd_sweep(cfg, _require_law(src), with_phi=False)
        elif cfg.command == "beta":
            art, status = _cmd_beta(cfg, _require_law(src))
        elif cfg.command == "simulate":
            art, status = _cmd_simulate(cfg, src)
        else:
            art, status = _cmd_embedded(cfg, src)
    except ConfigError as exc:
        return EXIT_CONFIG, f"error=config reason={json.dumps(str(exc))}"
    except InvalidLawError as exc:
        return EXIT_LAW, f"error=law reason={json.dumps(str(exc))}"
    except RuntimeInsufficiency as exc:
        return EXIT_RUNTIME, f"error=runtime reason={json.dumps(str(exc))}"
    fmt = cfg.format or ("json" if cfg.command in ("validate", "classify") else "csv")
    if isinstance(src, Environment):
        law_hash = hashlib.sha256(json.dumps([[d.to_dict(), h] for d, h in src.sites],
                                             sort_keys=True).encode()).hexdigest()
    else:
        law_hash = hashlib.sha256(json.dumps(src.to_dict(), sort_keys=True).encode()).hexdigest()
    meta = {"artifact": f"brwre {__version__}", "command": cfg.command, "seed": cfg.seed,
            "law_sha256": law_hash, "knobs": cfg.knobs()}
    return status, render(art, meta, fmt)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_CONFIG, f"error=config reason={json.dumps(message)}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default=None)

    p = _Parser(prog="brwre", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"brwre {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common], help="check the ellipticity conditions")
    s.add_argument("source")
    s = sub.add_parser("classify", parents=[common], help="LS/GS classification and critical drifts")
    s.add_argument("source")
    s.add_argument("--tol", type=float, default=1e-9)
    for name in ("phi-sweep", "phase-diagram"):
        s = sub.add_parser(name, parents=[common], help="regimes over a drift grid")
        s.add_argument("source")
        s.add_argument("--h-grid", dest="h_grid", default="0.01:1:100", help="a:b:steps or a,b,c")
        s.add_argument("--tol", type=float, default=1e-9)
    s = sub.add_parser("beta", parents=[common], help="estimate the growth profile")
    s.add_argument("source")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--replicas", type=int, default=50)
    s.add_argument("--grid", default="0.1:1:10")
    s.add_argument("--richardson", action="store_true", help="also report the change from n to 2n")
    s = sub.add_parser("simulate", parents=[common], help="particle simulation (law or environment)")
    s.add_argument("source")
    s.add_argument("--horizon", type=int, default=100)
    s.add_argument("--replicas", type=int, default=1000)
    s.add_argument("--cap", type=int, default=DEFAULT_CAP)
    s.add_argument("--growth", action="store_true", help="also fit growth rates on survival")
    s = sub.add_parser("embedded", parents=[common], help="embedded first-passage process")
    s.add_argument("source")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--budget", type=int, default=10**5)
    s.add_argument("--runs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(**vars(args))
    status, text = run_command(cfg)
    if text.startswith("error="):
        sys.stderr.write(text + "\n")
        return status
    if cfg.out:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
