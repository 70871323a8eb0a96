import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhrelax import integrands as itg
from bhrelax.tensor_core import random_sym

X0 = np.zeros(1)


def H1(v):
    return np.full((1, 1, 1), float(v))


def test_area_values_and_gradient():
    f = itg.area_integrand()
    assert f.value(H1(0.0)) == 1.0
    assert abs(f.value(H1(3.0)) - np.sqrt(10.0)) < 1e-15
    H = random_sym(np.random.default_rng(0), 1, 2, None)
    g = f.grad(np.zeros(2), H)
    h = 1e-6
    E = np.zeros_like(H)
    E[0, 0, 1] = E[0, 1, 0] = 1.0
    fd = (f(np.zeros(2), H + h * E) - f(np.zeros(2), H - h * E)) / (2 * h)
    assert abs(fd - np.sum(g * E)) < 1e-8


def test_double_well_values():
    f = itg.double_well_integrand()
    for h, expect in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (3.0, 2.0), (-0.25, 0.75)]:
        assert abs(f.value(H1(h)) - expect) < 1e-15


def test_double_well_rejects_non_lambda_centre():
    with pytest.raises(ValueError):
        itg.double_well_integrand(np.array([[[1.0, 0.0], [0.0, -1.0]]]) / np.sqrt(2))


def test_catalog_and_unknown_name():
    for name in itg.CATALOG:
        assert isinstance(itg.from_catalog(name), itg.Integrand)
    with pytest.raises(KeyError):
        itg.from_catalog("nonexistent")


@pytest.mark.parametrize("name", sorted(itg.CATALOG))
def test_catalog_integrands_satisfy_growth_and_continuity(name):
    rep = itg.validate(itg.from_catalog(name), itg.SamplePlan.default(1, 1))
    assert rep.passed["H1"] and rep.passed["H2"]


def test_validate_detects_growth_violation():
    bad = itg.Integrand(lambda x, H: np.sum(H * H, axis=(-3, -2, -1)), 1.0, name="quadratic")
    rep = itg.validate(bad, itg.SamplePlan.default(1, 1))
    assert not rep.passed["H1"]
    with pytest.raises(ValueError):
        itg.validate(bad, itg.SamplePlan.default(1, 1), strict=True)


def test_validate_detects_undeclared_x_dependence():
    f = itg.Integrand(lambda x, H: (1 + x[..., 0]) * itg._norm(H), 2.0, name="hidden-x")
    rep = itg.validate(f, itg.SamplePlan.default(1, 1))
    assert not rep.passed["H2"]


def test_integrand_constructor_checks():
    with pytest.raises(ValueError):
        itg.Integrand(lambda x, H: 0 * H, 0.0)
    with pytest.raises(ValueError):
        itg.Integrand(lambda x, H: 0 * H, 1.0, recession_alpha=1.0)


def test_coercivize_adds_norm():
    f = itg.coercivize(itg.area_integrand(), 0.1)
    assert abs(f.value(H1(-2.0)) - (np.sqrt(5.0) + 0.2)) < 1e-15
    assert f.coercivity_c == pytest.approx(0.1)
    assert abs(float(f.recession_exact(X0, H1(2.0))) - 2.2) < 1e-15
    assert itg.coercivize(f, 0.0) is f
    with pytest.raises(ValueError):
        itg.coercivize(f, -1.0)


def test_area_recession_rate():
    # independent bound: sqrt(1+t^2)/t - 1 = 1/(t (sqrt(1+t^2) + t)) <= 1/(2 t^2)
    t = 2.0 ** np.arange(21)
    gap = np.sqrt(1 + t * t) / t - 1
    assert np.all(gap <= 0.6 / t ** 2)
    est = itg.recession(itg.area_integrand(), X0, H1(1.0), t_schedule=t)
    assert est.rate_ok
    assert abs(est.value - 1.0) < 1e-9


@pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
def test_recession_homogeneity(s):
    f = itg.double_well_integrand()
    H = H1(0.7)
    base = itg.recession(f, X0, H).value
    assert abs(itg.recession(f, X0, s * H).value - s * base) < 1e-9 * max(1.0, s * base)


def test_recession_schedule_validation():
    with pytest.raises(ValueError):
        itg.recession(itg.area_integrand(), X0, H1(1.0), t_schedule=[1.0, 2.0, 4.0, 8.0])
    with pytest.raises(ValueError):
        itg.recession(itg.area_integrand(), X0, H1(1.0), t_schedule=[1.0, 0.5, 1e3, 1e4])


def test_recession_zero_direction():
    assert itg.recession(itg.area_integrand(), X0, H1(0.0)).value == 0.0


def test_estimated_recession_matches_analytic():
    f = itg.double_well_integrand()
    est = itg.recession_function(f, estimated=True)
    ana = itg.recession_function(f)
    for h in (-2.0, 0.3, 5.0):
        assert abs(est(X0, H1(h)) - ana(X0, H1(h))) < 1e-5 * abs(h)


def test_lower_upper_recession_agree_on_lambda_direction():
    res = itg.lower_upper_recession(itg.area_integrand(), X0, H1(1.0))
    assert res.in_lambda
    assert abs(res.upper - res.lower) < 1e-3


def test_eclass_transform_radial_limits():
    T = itg.eclass_transform(itg.area_integrand(), X0)
    assert abs(T(H1(0.0)) - 1.0) < 1e-15
    lim = T.radial_limits([H1(1.0)], levels=30)[0]
    # (1-s) sqrt(1 + s^2/(1-s)^2) -> 1
    assert lim.cauchy and abs(lim.limit - 1.0) < 1e-6
    with pytest.raises(ValueError):
        T(H1(1.0))


def test_scaled_integrand_doubles():
    f = itg.double_well_integrand()
    g = f.scaled(2.0)
    for h in (-3.0, 0.1, 2.0):
        assert g.value(H1(h)) == 2.0 * f.value(H1(h))
    with pytest.raises(ValueError):
        f.scaled(0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(0.01, 100.0))
def test_area_recession_bound_property(h, t):
    f = itg.area_integrand()
    q = f.value(H1(t * h)) / t
    assert q >= abs(h) - 1e-9
    assert q - abs(h) <= 1.0 / t + 1e-9
