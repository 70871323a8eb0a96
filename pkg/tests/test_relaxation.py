import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhrelax import integrands as itg
from bhrelax import measures as ms
from bhrelax import relaxation as rl
from bhrelax.bh_fields import BHField, kink_1d, quadratic_field


@pytest.fixture(scope="module")
def area_spec():
    return rl.EnergySpec(itg.area_integrand())


@pytest.fixture(scope="module")
def dw_spec():
    return rl.EnergySpec(itg.double_well_integrand())


def test_spec_rejects_bad_integrand():
    bad = itg.Integrand(lambda x, H: np.sum(H * H, axis=(-3, -2, -1)), 1.0)
    with pytest.raises(ValueError):
        rl.EnergySpec(bad)
    with pytest.raises(ValueError):
        rl.EnergySpec(itg.area_integrand(), liminf_tail=0)


def test_area_G_of_kink(area_spec):
    G = rl.energy_relaxed_G(kink_1d(), area_spec)
    # |(0,1)| from the ac part plus the jump 2 of u'
    assert G.ac == pytest.approx(1.0, abs=1e-12)
    assert G.singular == pytest.approx(2.0, abs=1e-12)
    assert G.total == pytest.approx(3.0, abs=1e-6)


def test_F_equals_G_for_smooth_convex_case(area_spec):
    dom = ms.GridDomain.box([0.0], [1.0], 64)
    u = quadratic_field(dom, [[2.0]])
    F = rl.energy_F(u, area_spec)
    assert F == pytest.approx(np.sqrt(5.0), abs=1e-12)
    assert rl.energy_relaxed_G(u, area_spec).total == pytest.approx(F, abs=1e-12)


def test_F_rejects_jumps(area_spec):
    with pytest.raises(ValueError):
        rl.energy_F(kink_1d(), area_spec)


def test_G_cubic_field_closed_form(area_spec):
    # u = x^3 / 6 on (0, 1): u'' = x, G = int sqrt(1 + x^2)
    dom = ms.GridDomain.box([0.0], [1.0], 32)
    u = BHField(dom, 1, {(3,): [1.0 / 6.0]})
    exact = 0.5 * (np.sqrt(2.0) + np.arcsinh(1.0))
    assert rl.energy_relaxed_G(u, area_spec).total == pytest.approx(exact, abs=1e-10)


def test_scaling_doubles_everything(area_spec):
    u = kink_1d()
    s2 = area_spec.scaled(2.0)
    assert rl.energy_relaxed_G(u, s2).total == pytest.approx(2 * rl.energy_relaxed_G(u, area_spec).total, rel=1e-14)
    terms = rl.mollification_terms(u, [16])
    assert terms[0].energy(s2.f) == pytest.approx(2 * terms[0].energy(area_spec.f), rel=1e-14)


@pytest.mark.parametrize("eps", [0.01, 0.1])
def test_coercivization_difference(area_spec, eps):
    rep = rl.coercivization_check(kink_1d(), area_spec, eps)
    # |D(u')| = 2 for the kink and f is convex, so the difference is 2 eps exactly
    assert rep.difference == pytest.approx(2 * eps, abs=1e-8)
    assert rep.passed


def test_coercivization_envelope_margin(dw_spec):
    Hs = np.array([[[[h]]] for h in (-2.0, 0.0, 1.5)])
    rep = rl.coercivization_check(kink_1d(), dw_spec, 0.1, H_grid=Hs)
    assert rep.table_margin >= -2e-2
    # hull of min(|t-1|,|t+1|) + eps|t| is eps on [-1, 1]: the ac part gains eps, the jump 2 eps
    assert rep.difference == pytest.approx(3 * 0.1, abs=1e-6)
    # the eps |D grad u| upper bound is a convex-case statement
    assert rep.difference > rep.bound and not rep.passed


def test_liminf_surrogate():
    assert rl.liminf_surrogate([5.0, 4.0, 3.0, 2.0, 3.0, 4.0, 5.0], tail=5) == 2.0
    assert rl.liminf_surrogate([1.0, 2.0], tail=5) == 1.0
    with pytest.raises(ValueError):
        rl.liminf_surrogate([])


def test_generate_unknown_name(area_spec):
    with pytest.raises(KeyError):
        rl.generate("nonsense", kink_1d(), area_spec, [8])


def test_laminate_energy_formula(dw_spec):
    # laminate with Hessian +-1 and spikes of width 1/n: F = 2 - 1/n
    terms = rl.laminate_terms(kink_1d(), dw_spec, [64, 128])
    for t in terms:
        assert t.energy(dw_spec.f) == pytest.approx(2.0 - 1.0 / t.n, abs=1e-9)
        assert t.l1_gap(kink_1d()) < 1.0 / t.n


def test_mollification_terms_converge(area_spec):
    u = kink_1d()
    terms = rl.mollification_terms(u, [16, 64, 256])
    e = [t.energy(area_spec.f) for t in terms]
    assert e[0] < e[1] < e[2] < 3.0
    assert 3.0 - e[2] < 0.01
    gaps = [t.w11_gap(u) for t in terms]
    assert gaps[0] > gaps[1] > gaps[2]


def test_oscillation_terms_are_admissible(area_spec):
    u = kink_1d()
    terms = rl.oscillation_terms(u, [64, 256])
    assert terms[1].l1_gap(u) < terms[0].l1_gap(u)


def test_upper_bound_area(area_spec):
    rep = rl.verify_upper_bound(kink_1d(), area_spec, [16, 64, 256])
    assert rep.passed
    assert rep.G_value == pytest.approx(3.0, abs=1e-6)
    assert abs(rep.F_sequence[-1] - 3.0) < 0.02 * 3.0


def test_lower_bound_area(area_spec):
    rep = rl.probe_lower_bound(kink_1d(), area_spec)
    assert rep.passed
    for p in rep.probes:
        if p.admissible:
            assert p.liminf >= 3.0 * (1 - 0.02)


def test_report_serialization_is_deterministic(area_spec, tmp_path):
    u = kink_1d()
    outs = []
    for k in range(2):
        rep = rl.verify_upper_bound(u, area_spec, [16, 64])
        p, c = tmp_path / f"r{k}.json", tmp_path / f"r{k}.csv"
        rep.save(p)
        rep.to_csv(c)
        outs.append((p.read_bytes(), c.read_bytes()))
    assert outs[0] == outs[1]
    data = json.loads(outs[0][0])
    assert data["kind"] == "upper"


def test_envelope_values_1d_table(dw_spec):
    H = np.array([[[[-2.0]]], [[[0.5]]], [[[3.0]]]])
    vals = rl.envelope_values(dw_spec, np.zeros((3, 1)), H)
    np.testing.assert_allclose(vals, [1.0, 0.0, 2.0], atol=0.02)


@pytest.mark.slow
def test_double_well_sandwich(dw_spec):
    u = kink_1d()
    G = rl.energy_relaxed_G(u, dw_spec)
    assert abs(G.total - 2.0) <= 0.02 * 2.0
    low = rl.probe_lower_bound(u, dw_spec, G=G)
    assert low.passed
    lam = [p for p in low.probes if p.name == "laminate"][0]
    assert lam.liminf <= 2.0 * 1.02


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(0.5, 5.0))
def test_area_G_kink_property(c, jump):
    spec = rl.EnergySpec(itg.area_integrand())
    G = rl.energy_relaxed_G(kink_1d(c, jump), spec).total
    assert G == pytest.approx(1.0 + jump, abs=1e-9)
