"""Command-line front end: ``bhrelax {envelope,relax,approx,verify}``.

Settings come from an INI file (``--config``); flags override it.  Exit
codes: 0 when every check in scope passes, 1 on a failed check, 2 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import envelope as env
from . import extension as ex
from . import integrands as itg
from . import measures as ms
from . import relaxation as rl
from . import tensor_core as tc
from .bh_fields import BHField, kink_1d, ridge_field
from .quadrature import gauss_legendre

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
COMMANDS = ("envelope", "relax", "approx", "verify")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- configuration

DEFAULTS = {
    "run": {"seed": "0", "out": "bhrelax-out", "tol": "0.02"},
    "integrand": {"name": "area", "eps": "0"},
    "field": {"kind": "", "c": "0.5", "slope_jump": "2", "cells": "256", "nu": "1,0", "a": "1",
              "lo": "0", "hi": "1", "path": ""},
    "envelope": {"h_min": "-3", "h_max": "3", "h_points": "51", "x": "0", "levels": "", "starts": "8"},
    "schedules": {"n": "8,16,32,64,128,256", "t": "", "r": "", "probe_n": "64,128,256,512,1024"},
    "relax": {"expected": "", "upper": "no", "lower": "no"},
    "approx": {"area_tol": "", "cells_per_eps": "8"},
    "verify": {"suites": "all", "kernel": "standard"},
}


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str = "bhrelax-out"
    tol: float = 0.02
    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)
    lines: Dict[Tuple[str, str], int] = field(default_factory=dict)
    source: str = "<defaults>"

    def raw(self, section: str, key: str) -> str:
        return self.sections.get(section, {}).get(key, DEFAULTS.get(section, {}).get(key, ""))

    def where(self, section: str, key: str) -> str:
        line = self.lines.get((section, key))
        return f"{self.source}:{line}" if line else self.source

    def get(self, section: str, key: str, conv: Callable, allow_empty: bool = False):
        raw = self.raw(section, key).strip()
        if raw == "":
            if allow_empty:
                return None
            raise UsageError(f"{self.where(section, key)}: [{section}] {key} is required")
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{self.where(section, key)}: [{section}] {key} = {raw!r}: {exc}") from None

    def floats(self, section: str, key: str, allow_empty: bool = False):
        return self.get(section, key, lambda s: [float(v) for v in s.split(",") if v.strip()], allow_empty)

    def ints(self, section: str, key: str, allow_empty: bool = False):
        return self.get(section, key, lambda s: [int(v) for v in s.split(",") if v.strip()], allow_empty)

    def flag(self, section: str, key: str) -> bool:
        def conv(s):
            s = s.lower()
            if s in ("1", "yes", "true", "on"):
                return True
            if s in ("0", "no", "false", "off"):
                return False
            raise ValueError("expected yes or no")
        return self.get(section, key, conv)


def _line_numbers(path: str) -> Dict[Tuple[str, str], int]:
    out, section = {}, None
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            s = line.strip()
            if s.startswith("[") and s.endswith("]"):
                section = s[1:-1].strip()
            elif section and ("=" in s or ":" in s) and not s.startswith(("#", ";")):
                key = s.split("=", 1)[0].split(":", 1)[0].strip().lower()
                out[(section, key)] = i
    return out


def load_config(command: str, path: Optional[str] = None, seed: Optional[int] = None, out: Optional[str] = None,
                tol: Optional[float] = None, suite: Optional[str] = None) -> RunConfig:
    sections: Dict[str, Dict[str, str]] = {}
    lines: Dict[Tuple[str, str], int] = {}
    source = "<defaults>"
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise UsageError(f"{path}: {exc}") from None
        for sec in parser.sections():
            if sec not in DEFAULTS:
                raise UsageError(f"{path}: unknown section [{sec}]")
            for key, val in parser.items(sec):
                if key not in DEFAULTS[sec]:
                    line = _line_numbers(path).get((sec, key))
                    raise UsageError(f"{path}:{line}: unknown key {key!r} in [{sec}]")
                sections.setdefault(sec, {})[key] = val
        lines = _line_numbers(path)
        source = path
    cfg = RunConfig(command, sections=sections, lines=lines, source=source)
    cfg.seed = seed if seed is not None else cfg.get("run", "seed", int)
    cfg.out = out if out is not None else cfg.get("run", "out", str)
    cfg.tol = tol if tol is not None else cfg.get("run", "tol", float)
    if not cfg.tol > 0:
        raise UsageError("tolerance must be positive")
    if suite is not None:
        cfg.sections.setdefault("verify", {})["suites"] = suite
    return cfg


# ---------------------------------------------------------------- builders

def build_integrand(cfg: RunConfig) -> itg.Integrand:
    name = cfg.get("integrand", "name", str)
    try:
        f = itg.from_catalog(name)
    except KeyError as exc:
        raise UsageError(f"{cfg.where('integrand', 'name')}: {exc.args[0]}") from None
    eps = cfg.get("integrand", "eps", float)
    if eps < 0:
        raise UsageError(f"{cfg.where('integrand', 'eps')}: eps must be nonnegative")
    return itg.coercivize(f, eps)


def build_field(cfg: RunConfig) -> BHField:
    kind = cfg.raw("field", "kind").strip()
    if not kind:
        raise UsageError("a field specification ([field] kind) is required")
    cells = cfg.get("field", "cells", int)
    if kind == "kink":
        lo, hi = cfg.get("field", "lo", float), cfg.get("field", "hi", float)
        dom = ms.GridDomain((lo,), (hi,), (cells,))
        return kink_1d(cfg.get("field", "c", float), cfg.get("field", "slope_jump", float), dom)
    if kind == "ridge":
        nu = cfg.floats("field", "nu")
        N = len(nu)
        dom = ms.GridDomain(np.full(N, cfg.get("field", "lo", float)), np.full(N, cfg.get("field", "hi", float)),
                            (max(cells // 16, 4),) * N)
        return ridge_field(dom, nu, cfg.get("field", "c", float), cfg.floats("field", "a"))
    if kind == "file":
        path = cfg.get("field", "path", str)
        try:
            return BHField.load(path)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"{cfg.where('field', 'path')}: cannot load field: {exc}") from None
    raise UsageError(f"{cfg.where('field', 'kind')}: unknown field kind {kind!r} (kink, ridge, file)")


def build_spec(cfg: RunConfig, f: itg.Integrand, N: int = 1, d: int = 1) -> rl.EnergySpec:
    levels = cfg.ints("envelope", "levels", allow_empty=True)
    t = cfg.floats("schedules", "t", allow_empty=True)
    try:
        return rl.EnergySpec(f, N, d, tuple(levels) if levels else None, cfg.get("envelope", "starts", int),
                             cfg.seed, None if t is None else np.asarray(t))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- output

def _ensure_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------- commands

def oracle_1d(f: itg.Integrand, x, h_grid, pad: float = 10.0, points: int = 20001) -> np.ndarray:
    """Convexification of ``t -> f(x, t)`` sampled on a padded grid."""
    t = np.linspace(min(h_grid) - pad, max(h_grid) + pad, points)
    vals = f(np.broadcast_to(np.asarray(x, float), (t.size, 1)), t[:, None, None, None])
    return env.convexify_1d(t, vals)(np.asarray(h_grid, float))


def cmd_envelope(cfg: RunConfig) -> int:
    f = build_integrand(cfg)
    spec = build_spec(cfg, f)
    n = cfg.get("envelope", "h_points", int)
    if n < 1:
        raise UsageError(f"{cfg.where('envelope', 'h_points')}: the H grid is empty")
    h = np.linspace(cfg.get("envelope", "h_min", float), cfg.get("envelope", "h_max", float), n)
    x = np.array([cfg.get("envelope", "x", float)])
    rows, worst = [], 0.0
    oracle = oracle_1d(f, x, h)
    for hk, ok in zip(h, oracle):
        H = np.full((1, 1, 1), hk)
        res = env.quasiconvex_envelope(f, x, H, levels=spec.levels, starts=spec.starts, seed=cfg.seed)
        lower = env.envelope_lower_bracket(f, x, H)
        fv = float(f(x, H))
        err = abs(res.value - ok) / max(1.0, abs(ok))
        worst = max(worst, err)
        rows.append([float(hk), fv, lower, res.value, float(ok), err])
    out = _ensure_out(cfg)
    _write_csv(os.path.join(out, "envelope.csv"), ["h", "f", "lower", "envelope", "oracle", "rel_error"], rows)
    passed = worst <= cfg.tol
    _write_json(os.path.join(out, "envelope.json"),
                {"integrand": f.name, "max_rel_error": worst, "tol": cfg.tol, "passed": passed, "points": n})
    print(f"{'PASS' if passed else 'FAIL'} envelope: max relative oracle error {worst:.3e} (tol {cfg.tol:g})")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_relax(cfg: RunConfig) -> int:
    u = build_field(cfg)
    f = build_integrand(cfg)
    spec = build_spec(cfg, f, u.N, u.d)
    G = rl.energy_relaxed_G(u, spec)
    result = {"G": G.total, "ac": G.ac, "singular": G.singular, "integrand": f.name, "warnings": G.warnings}
    verdicts = {}
    expected = cfg.get("relax", "expected", float, allow_empty=True)
    if expected is not None:
        verdicts["expected"] = abs(G.total - expected) <= cfg.tol * max(1.0, abs(expected))
        result["expected"] = expected
    out = _ensure_out(cfg)
    rows = []
    if cfg.flag("relax", "upper"):
        rep = rl.verify_upper_bound(u, spec, cfg.ints("schedules", "n"), cfg.tol, G=G)
        verdicts.update({f"upper.{k}": v for k, v in rep.verdicts.items()})
        result["upper"] = rep.to_dict()
        rows += [["upper", dg["n"], e, r] for dg, e, r in zip(rep.diagnostics, rep.F_sequence, rep.raw_sequence)]
    if cfg.flag("relax", "lower"):
        rep = rl.probe_lower_bound(u, spec, n_schedule=cfg.ints("schedules", "probe_n"), tol=cfg.tol, G=G)
        verdicts.update({f"lower.{k}": v for k, v in rep.verdicts.items()})
        result["lower"] = rep.to_dict()
        rows += [[p.name, n, e, e] for p in rep.probes for n, e in zip(p.n, p.energies)]
    result["verdicts"] = verdicts
    passed = all(verdicts.values())
    result["passed"] = passed
    _write_json(os.path.join(out, "relax.json"), result)
    _write_csv(os.path.join(out, "relax.csv"), ["sequence", "n", "energy", "raw_energy"], rows)
    print(f"{'PASS' if passed else 'FAIL'} relax: G = {G.total!r}")
    return EXIT_OK if passed else EXIT_FAIL


def cmd_approx(cfg: RunConfig) -> int:
    u = build_field(cfg)
    n_sched = cfg.ints("schedules", "n")
    if not n_sched:
        raise UsageError(f"{cfg.where('schedules', 'n')}: empty n schedule")
    try:
        rep = ex.smooth_approximation(u, n_sched, cfg.get("approx", "cells_per_eps", int))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _ensure_out(cfg)
    _write_csv(os.path.join(out, "approx.csv"), ["n", "eps", "area", "area_gap", "weakstar_gap", "w11_gap"],
               list(rep.rows()))
    verdicts = {"boundary_mass": rep.boundary_mass < 1e-6,
                "finite": bool(np.all(np.isfinite([r[2] for r in rep.rows()])))}
    area_tol = cfg.get("approx", "area_tol", float, allow_empty=True)
    if area_tol is not None:
        verdicts["area_gap"] = rep.final_area_gap < area_tol
    passed = all(verdicts.values())
    _write_json(os.path.join(out, "approx.json"),
                {"area_target": rep.area_target, "final_rel_gap": rep.final_area_gap,
                 "boundary_mass": rep.boundary_mass, "area_strict": bool(rep.area_strict),
                 "verdicts": verdicts, "passed": passed})
    print(f"{'PASS' if passed else 'FAIL'} approx: final relative area gap {rep.final_area_gap:.3e}")
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------- verification suites

@dataclass
class Check:
    suite: str
    name: str
    value: float
    passed: bool


def _suite_tensor(cfg: RunConfig) -> List[Check]:
    out = []
    rng = np.random.default_rng(cfg.seed)
    for N, d in ((1, 1), (2, 1), (2, 2), (3, 1)):
        basis = tc.build_lambda_basis(N, d)
        out.append(Check("tensor", f"M({N},{d})", basis.M, basis.M == d * N * (N + 1) // 2))
        H = tc.random_sym(rng, d, N, 50)
        err = max(float(tc.frobenius(basis.reconstruct(tc.decompose(h, basis)) - h)) for h in H)
        out.append(Check("tensor", f"reconstruction({N},{d})", err, err < 1e-10))
    return out


def _kernel(cfg: RunConfig) -> ex.MomentKernel:
    kind = cfg.get("verify", "kernel", str)
    if kind == "standard":
        return ex.moment_kernel()
    if kind == "broken":
        return ex.broken_moment_kernel()
    raise UsageError(f"{cfg.where('verify', 'kernel')}: unknown kernel {kind!r} (standard, broken)")


def _suite_moments(cfg: RunConfig) -> List[Check]:
    k = _kernel(cfg)
    lam, w = gauss_legendre(ex.N_LAMBDA, 1.0, 2.0)
    q0 = float(w @ k(lam))
    q1 = float(w @ (lam * k(lam)))
    return [Check("moments", "mass", float(k.moment(0)), k.moment(0) == 1),
            Check("moments", "first_moment", float(k.moment(1)), k.moment(1) == 0),
            Check("moments", "quadrature_mass", q0, abs(q0 - 1) < 1e-12),
            Check("moments", "quadrature_first", q1, abs(q1) < 1e-12)]


def _suite_extension(cfg: RunConfig) -> List[Check]:
    k = _kernel(cfg)
    hs = ex.SpecialLipschitzDomain.half_space(2)
    dom = ms.GridDomain((-1.0, 0.0), (1.0, 1.0), (4, 4))
    ua = BHField(dom, 1, {(0, 0): [0.7], (1, 0): [-0.4], (0, 1): [1.3]})
    uq = BHField(dom, 1, {(0, 2): [1.0]})
    rng = np.random.default_rng(cfg.seed)
    x = np.stack([rng.uniform(-1, 1, 20), -rng.uniform(0.01, 1, 20)], axis=-1)
    out = []
    op = ex.ExtensionOperator(hs, k)
    e = op.apply(ua, x)
    err = float(max(np.abs(e.values - ua.value(x)).max(), np.abs(e.grads - ua.grad(x)).max()))
    out.append(Check("extension", "affine", err, err < 1e-10))
    op2 = ex.ExtensionOperator(hs, k, kappa=2.0)
    err = float(np.abs(op2.apply(uq, x).values[:, 0] + 23.0 / 3.0 * x[:, 1] ** 2).max())
    out.append(Check("extension", "quadratic", err, err < 1e-8))
    w = ex.SpecialLipschitzDomain.wedge()
    s = rng.uniform(-1, 1, 20)
    y = np.stack([s, np.abs(s) - rng.uniform(0.05, 1, 20)], axis=-1)
    slope = float(np.max(ex.vertical_slope(w, y)))
    out.append(Check("extension", "wedge_slope", slope, slope <= -1.0 / 3.0 + 1e-3))
    return out


def _suite_measures(cfg: RunConfig) -> List[Check]:
    out = []
    gs = {"abs": lambda v: np.linalg.norm(v, axis=-1), "area": lambda v: np.sqrt(1 + np.sum(v * v, axis=-1))}
    worst = -np.inf
    for seed in range(cfg.seed, cfg.seed + 5):
        mu = ms.random_measure(seed, N=1, cells=64, m=2)
        for g in gs.values():
            worst = max(worst, ms.jensen_ac_gap(mu, 0.1, g), ms.jensen_singular_gap(mu, 0.1, g))
    out.append(Check("measures", "jensen", worst, worst <= 1e-6))
    rep = ex.smooth_approximation(kink_1d(), [32, 64])
    out.append(Check("measures", "area_gap_n64", rep.final_area_gap, rep.final_area_gap < 0.02))
    return out


def _suite_integrands(cfg: RunConfig) -> List[Check]:
    out = []
    plan = itg.SamplePlan.default(1, 1, seed=cfg.seed)
    for name in sorted(itg.CATALOG):
        rep = itg.validate(itg.from_catalog(name), plan)
        out.append(Check("integrands", f"hypotheses.{name}", min(rep.margins.values()), bool(rep)))
    est = itg.recession(itg.area_integrand(), np.zeros(1), np.ones((1, 1, 1)))
    out.append(Check("integrands", "area_rate", est.rate_worst, bool(est.rate_ok)))
    return out


def _suite_envelope(cfg: RunConfig) -> List[Check]:
    out = []
    f = itg.double_well_integrand()
    h = np.array([0.0, 0.5, 1.5])
    orc = oracle_1d(f, np.zeros(1), h)
    worst = 0.0
    for hk, ok in zip(h, orc):
        v = env.quasiconvex_envelope(f, np.zeros(1), np.full((1, 1, 1), hk), seed=cfg.seed).value
        worst = max(worst, abs(v - ok) / max(1.0, abs(ok)))
    out.append(Check("envelope", "double_well_oracle", worst, worst <= cfg.tol))
    a = itg.area_integrand()
    v = env.quasiconvex_envelope(a, np.zeros(1), np.full((1, 1, 1), 0.7), use_convexity=False, levels=(35,)).value
    err = abs(v - float(a(np.zeros(1), np.full((1, 1, 1), 0.7))))
    out.append(Check("envelope", "area_fixed_point", err, err < 1e-6))
    return out


def _suite_relaxation(cfg: RunConfig) -> List[Check]:
    u = kink_1d()
    spec = rl.EnergySpec(itg.area_integrand())
    G = rl.energy_relaxed_G(u, spec).total
    out = [Check("relaxation", "area_G", G, abs(G - 3.0) < 1e-6)]
    for eps in (0.01, 0.1):
        rep = rl.coercivization_check(u, spec, eps)
        out.append(Check("relaxation", f"coercive_{eps:g}", rep.difference, abs(rep.difference - 2 * eps) < 1e-8))
    G2 = rl.energy_relaxed_G(u, spec.scaled(2.0)).total
    out.append(Check("relaxation", "scaling", G2, abs(G2 - 2 * G) < 1e-12))
    return out


SUITES: Dict[str, Callable[[RunConfig], List[Check]]] = {
    "tensor": _suite_tensor,
    "moments": _suite_moments,
    "extension": _suite_extension,
    "measures": _suite_measures,
    "integrands": _suite_integrands,
    "envelope": _suite_envelope,
    "relaxation": _suite_relaxation,
}


def cmd_verify(cfg: RunConfig) -> int:
    raw = cfg.get("verify", "suites", str)
    names = sorted(SUITES) if raw.strip() == "all" else [s.strip() for s in raw.split(",") if s.strip()]
    unknown = [s for s in names if s not in SUITES]
    if unknown or not names:
        raise UsageError(f"unknown suite {', '.join(unknown) or '(none)'}; choose from all, {', '.join(sorted(SUITES))}")
    np.random.seed(cfg.seed)
    checks: List[Check] = []
    for name in names:
        try:
            checks += SUITES[name](cfg)
        except (AssertionError, RuntimeError, ValueError) as exc:
            checks.append(Check(name, "error", float("nan"), False))
            print(f"error in suite {name}: {exc}", file=sys.stderr)
    out = _ensure_out(cfg)
    summary = {}
    for name in names:
        mine = [c for c in checks if c.suite == name]
        summary[name] = all(c.passed for c in mine)
        print(f"{'PASS' if summary[name] else 'FAIL'} {name}")
    passed = all(summary.values())
    _write_json(os.path.join(out, "verify.json"),
                {"seed": cfg.seed, "suites": summary, "passed": passed,
                 "checks": [{"suite": c.suite, "name": c.name, "value": c.value, "passed": c.passed} for c in checks]})
    _write_csv(os.path.join(out, "verify.csv"), ["suite", "check", "value", "passed"],
               [[c.suite, c.name, float(c.value), int(c.passed)] for c in checks])
    return EXIT_OK if passed else EXIT_FAIL


HANDLERS = {"envelope": cmd_envelope, "relax": cmd_relax, "approx": cmd_approx, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bhrelax", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--tol", type=float)
    p.add_argument("--suite", metavar="NAME")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.command, args.config, args.seed, args.out, args.tol, args.suite)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
