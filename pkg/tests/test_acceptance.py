"""Acceptance gate: one PASS/FAIL line per criterion, printed through the capture."""

import time
from fractions import Fraction

import numpy as np
import pytest

from bhrelax import cli
from bhrelax import envelope as env
from bhrelax import extension as ex
from bhrelax import integrands as itg
from bhrelax import measures as ms
from bhrelax import relaxation as rl
from bhrelax import tensor_core as tc
from bhrelax.bh_fields import BHField, kink_1d

pytestmark = pytest.mark.acceptance

X0 = np.zeros(1)
ABS = lambda v: np.linalg.norm(v, axis=-1)
AREA = lambda v: np.sqrt(1 + np.sum(v * v, axis=-1))


def verdict(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {k:2d}: {detail}")
    assert ok, detail


def H1(v):
    return np.full((1, 1, 1), float(v))


def dw_oracle(h):
    return max(abs(h) - 1.0, 0.0)


def test_01_relaxed_energy_convex_case(capsys):
    t0 = time.perf_counter()
    G = rl.energy_relaxed_G(kink_1d(), rl.EnergySpec(itg.area_integrand())).total
    dt = time.perf_counter() - t0
    ok = abs(G - 3.0) <= 1e-6 and dt < 1.0
    verdict(capsys, 1, ok, f"G = {G:.12f} (target 3 +- 1e-6), {dt:.2f} s")


def test_02_relaxation_sandwich_double_well(capsys):
    t0 = time.perf_counter()
    f = itg.double_well_integrand()
    spec = rl.EnergySpec(f)
    u = kink_1d()
    G = rl.energy_relaxed_G(u, spec)
    g_ok = abs(G.total - 2.0) <= 0.02 * 2.0
    hs = np.linspace(-3.0, 3.0, 51)
    errs = [abs(env.quasiconvex_envelope(f, X0, H1(h)).value - dw_oracle(h)) / max(1.0, dw_oracle(h)) for h in hs]
    oracle_ok = max(errs) <= 0.02
    low = rl.probe_lower_bound(u, spec, G=G)
    lam = [p for p in low.probes if p.name == "laminate"][0]
    adm = [p for p in low.probes if p.admissible]
    floor = min(p.liminf for p in adm)
    dt = time.perf_counter() - t0
    ok = g_ok and oracle_ok and lam.admissible and lam.liminf <= 2.0 * 1.02 and floor >= 2.0 * 0.98 and dt < 120
    verdict(capsys, 2, ok, f"G = {G.total:.5f}, oracle max rel err {max(errs):.2e}, laminate {lam.liminf:.5f}, "
                           f"lowest admissible liminf {floor:.5f} over {len(adm)} probes, {dt:.1f} s")


def test_03_area_strict_density(capsys):
    t0 = time.perf_counter()
    u = kink_1d()
    rep = ex.smooth_approximation(u, [16, 64, 256], tests=ms.bump_test_functions(u.domain, 5, seed=0))
    weak = float(np.max(rep.terms[-1].weakstar))
    dt = time.perf_counter() - t0
    ok = rep.final_area_gap < 0.01 and weak < 1e-3 and len(rep.terms[-1].weakstar) == 5 and dt < 30
    verdict(capsys, 3, ok, f"final area gap {rep.final_area_gap:.2e} at n = 256, weak-* {weak:.2e}, {dt:.1f} s")


def test_04_jensen_bounds(capsys):
    worst = -np.inf
    for seed in range(20):
        N = 1 + seed % 2
        mu = ms.random_measure(seed, N=N, cells=64 if N == 1 else 32)
        for g in (ABS, AREA):
            worst = max(worst, ms.jensen_ac_gap(mu, 0.1, g), ms.jensen_singular_gap(mu, 0.1, g))
    verdict(capsys, 4, worst <= 1e-6, f"largest Jensen excess {worst:.2e} over 20 seeds (tol 1e-6)")


def test_05_extension_operator(capsys):
    hs = ex.SpecialLipschitzDomain.half_space(2)
    dom = ms.GridDomain.box([-1.0, -1.0], [1.0, 1.0], 4)
    aff = BHField(dom, 1, {(0, 0): [0.7], (1, 0): [-0.4], (0, 1): [1.3]})
    x = np.stack([np.linspace(-1, 1, 25), -np.linspace(0.01, 2, 25)], axis=-1)
    e = ex.extend(aff, hs, x)
    aff_err = float(max(np.max(np.abs(e.values - aff.value(x))), np.max(np.abs(e.grads - aff.grad(x)))))
    # exact rational oracle: int_1^2 (28 - 18 l)(2 l - 1)^2 dl
    coeffs = np.polymul([-18, 28], np.polymul([2, -1], [2, -1]))[::-1]
    factor = sum(Fraction(int(c)) * (Fraction(2) ** (k + 1) - 1) / (k + 1) for k, c in enumerate(coeffs))
    q = BHField(dom, 1, {(0, 2): [1.0]})
    xq = np.stack([np.linspace(-1, 1, 9), -np.linspace(0.1, 1.5, 9)], axis=-1)
    eq = ex.ExtensionOperator(hs, kappa=2.0).apply(q, xq)
    quad_err = float(np.max(np.abs(eq.values[:, 0] - (-23 / 3) * xq[:, 1] ** 2)))
    u = BHField(dom, 1, {(0, 2): [1.0], (2, 0): [0.5]})
    table = ex.trace_gap(u, ex.ExtensionOperator(hs), 2.0 ** -np.arange(3, 15), np.array([[0.0, 0.0], [0.5, 0.0]]))
    ok = (aff_err < 1e-10 and factor == Fraction(-23, 3) and quad_err < 1e-8
          and table.decreasing() and table.passed(1e-3))
    verdict(capsys, 5, ok, f"affine err {aff_err:.1e}, factor {factor}, quadratic err {quad_err:.1e}, "
                           f"final trace gaps {table.value_gaps[-1]:.1e} / {table.grad_gaps[-1]:.1e} at r = 2^-14")


def test_06_lieberman_wedge(capsys):
    w = ex.SpecialLipschitzDomain.wedge()
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, 100)
    x = np.stack([s, np.abs(s) - rng.uniform(0.05, 1.0, 100)], axis=-1)
    res = ex.regularized_distance(w, x)
    slope = float(np.max(ex.vertical_slope(w, x)))
    resid, iters = float(np.max(res.residual)), int(np.max(res.iterations))
    ok = slope <= -1 / 3 + 1e-3 and resid < 1e-8 and iters <= 30
    verdict(capsys, 6, ok, f"max vertical slope {slope:.4f}, residual {resid:.1e}, iterations {iters}")


def test_07_lambda_basis(capsys):
    rows, ok = [], True
    for N, d in ((1, 1), (2, 1), (2, 2), (3, 1)):
        basis = tc.build_lambda_basis(N, d)
        H = tc.random_sym(np.random.default_rng(N * 10 + d), d, N, 1000)
        c = tc.decompose(H, basis)
        err = float(tc.frobenius(basis.reconstruct(c) - H).max())
        ratio = np.abs(c).sum(axis=-1) / tc.frobenius(H)
        C = basis.equiv_constant_exact
        equiv = bool(np.all(ratio <= C * (1 + 1e-12)) and np.all(ratio >= (1 - 1e-12) / C))
        ok &= basis.M == d * N * (N + 1) // 2 and err < 1e-10 and equiv
        rows.append(f"({N},{d}) M={basis.M} err={err:.0e}")
    verdict(capsys, 7, ok, "; ".join(rows))


def test_08_recession_rates(capsys):
    t = 2.0 ** np.arange(21)
    rate = np.sqrt(1 + t * t) / t - 1
    rate_ok = bool(np.all(rate <= 0.6 / t ** 2))
    est = itg.recession(itg.area_integrand(), X0, H1(1.0), t_schedule=t)
    worst = 0.0
    for f in (itg.area_integrand(), itg.double_well_integrand()):
        for h in (0.7, -1.3):
            base = itg.recession(f, X0, H1(h)).value
            for s in (0.5, 2.0, 10.0):
                val = itg.recession(f, X0, H1(s * h)).value
                worst = max(worst, abs(val - s * base) / max(1.0, abs(s * base)))
    ok = rate_ok and est.rate_ok and worst < 1e-9
    verdict(capsys, 8, ok, f"rate bound on k = 0..20 {rate_ok}, homogeneity error {worst:.1e}")


def test_09_reshetnyak_lsc(capsys):
    cells = 2 ** 20
    eps = [4e-5 / 2 ** (k / 4) for k in range(5)]
    worst, ok = np.inf, True
    for seed in range(10):
        base = ms.random_measure(seed, N=1, cells=cells, m=1 + seed % 2)
        mu = ms.zero_extend(base, int(np.ceil(max(eps) * cells)) + 1)
        rep = ms.reshetnyak_lsc_check([ms.mollified_measure(mu, e) for e in eps], mu, ABS, 1e-3)
        worst = min(worst, rep.liminf_surrogate - rep.limit_value)
        ok &= rep.passed
    verdict(capsys, 9, ok, f"smallest liminf surrogate minus limit {worst:.2e} over 10 seeds (tol -1e-3)")


def test_10_coercivization(capsys):
    spec = rl.EnergySpec(itg.area_integrand())
    diffs = {eps: rl.coercivization_check(kink_1d(), spec, eps).difference for eps in (0.01, 0.1)}
    ok = all(abs(d - 2 * eps) <= 1e-8 for eps, d in diffs.items())
    verdict(capsys, 10, ok, ", ".join(f"eps {e}: diff {d:.10f}" for e, d in diffs.items()))


def test_11_determinism(capsys, tmp_path):
    blobs, rcs = [], []
    for k in range(2):
        out = tmp_path / f"run{k}"
        rcs.append(cli.main(["verify", "--seed", "0", "--out", str(out)]))
        blobs.append(tuple((out / n).read_bytes() for n in ("verify.json", "verify.csv")))
    ok = rcs == [0, 0] and blobs[0] == blobs[1]
    verdict(capsys, 11, ok, f"exit codes {rcs}, outputs identical {blobs[0] == blobs[1]}")
