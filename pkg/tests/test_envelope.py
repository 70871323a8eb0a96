import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhrelax import envelope as env
from bhrelax import integrands as itg
from bhrelax.tensor_core import LambdaGenerator

X0 = np.zeros(1)


def H1(v):
    return np.full((1, 1, 1), float(v))


def dw_oracle(h):
    # convexification of min(|t-1|, |t+1|): 0 on [-1, 1], |t| - 1 outside
    return max(abs(h) - 1.0, 0.0)


def test_convexify_1d_simple_hull():
    t = np.array([-1.0, 0.0, 1.0, 2.0])
    hull = env.convexify_1d(t, np.array([1.0, 5.0, 1.0, 2.0]))
    np.testing.assert_array_equal(hull.knots, [-1.0, 1.0, 2.0])
    assert hull(0.0) == pytest.approx(1.0)
    assert hull.supporting_segment(0.0) == (-1.0, 1.0)
    assert hull.supporting_segment(1.0) == (1.0, 1.0)


def test_convexify_1d_validation():
    with pytest.raises(ValueError):
        env.convexify_1d([0.0, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        env.convexify_1d([0.0, 0.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        env.convexify_1d([1.0, 0.0, 2.0], [0.0, 1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=5, max_size=30))
def test_convexify_is_convex_minorant(vals):
    t = np.linspace(-1, 1, len(vals))
    v = np.array(vals)
    hull = env.convexify_1d(t, v)
    h = hull(t)
    assert np.all(h <= v + 1e-9)
    slopes = np.diff(hull.values) / np.diff(hull.knots)
    assert np.all(np.diff(slopes) >= -1e-9)


def test_convex_envelope_lp_matches_hull():
    t = np.linspace(-3, 3, 61)
    f = itg.double_well_integrand()
    vals = f(X0, t[:, None, None, None])
    for h in (-2.0, -0.5, 0.0, 0.7, 2.5):
        assert env.convex_envelope_lp(t[:, None], vals, np.array([h])) == pytest.approx(dw_oracle(h), abs=1e-9)


def test_hessian_stencil_exact_on_quadratics():
    n = 10
    st_ = env.hessian_stencil(2, 1, n)
    x = np.linspace(0, 1, n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = 0.5 * X ** 2 + 3 * X * Y - Y ** 2
    free = W.reshape(-1)[st_.free]
    full = np.zeros(n * n)
    full[st_.free] = free
    # only free nodes are active; check the interior rows that see no fixed nodes
    H = st_.apply(free).reshape(n - 2, n - 2, 2, 2)
    inner = H[2:-2, 2:-2]
    np.testing.assert_allclose(inner[..., 0, 0], 1.0, atol=1e-9)
    np.testing.assert_allclose(inner[..., 0, 1], 3.0, atol=1e-9)
    np.testing.assert_allclose(inner[..., 1, 1], -2.0, atol=1e-9)
    with pytest.raises(ValueError):
        env.hessian_stencil(1, 1, 7)


def test_perturbation_grid_boundary_layers():
    w = env.PerturbationGrid.zeros(1, 1, 10)
    assert np.all(w.hessians() == 0)
    bad = np.zeros((1, 10))
    bad[0, 1] = 1.0
    with pytest.raises(ValueError):
        env.PerturbationGrid(1, 1, 10, bad)


def test_mean_hessian_of_perturbation_vanishes_1d():
    rng = np.random.default_rng(0)
    st_ = env.hessian_stencil(1, 1, 35)
    w = env.PerturbationGrid.from_free(st_, rng.standard_normal(st_.n_free))
    # telescoping second differences with zero boundary layers
    assert abs(float(w.mean_hessian().sum())) < 1e-9


def test_laminate_perturbation_two_states():
    g = LambdaGenerator([1.0], [1.0])
    w = env.laminate_perturbation(1, 1, 35, g, 1.0, -1.0)
    vals = np.round(w.hessians().reshape(-1), 8)
    assert set(np.unique(vals)) <= {-1.0, 0.0, 1.0}


def test_discrete_energy_of_convex_integrand_exceeds_value():
    f = itg.area_integrand()
    rep = env.check_2quasiconvexity(f, X0, [H1(0.0), H1(1.3)],
                                    [env.block_laminate(1, 1, 34, LambdaGenerator([1.0], [1.0]), a) for a in (0.5, 2.0)])
    assert rep.passed and rep.min_margin >= -1e-12


def test_double_well_fails_2quasiconvexity():
    f = itg.double_well_integrand()
    w = env.laminate_perturbation(1, 1, 67, LambdaGenerator([1.0], [1.0]), 1.0, -1.0)
    rep = env.check_2quasiconvexity(f, X0, [H1(0.0)], [w])
    assert not rep.passed


def test_convex_integrand_shortcut():
    f = itg.area_integrand()
    res = env.quasiconvex_envelope(f, X0, H1(0.8))
    assert res.value == pytest.approx(np.sqrt(1.64), abs=1e-15)
    assert res.starts_used == 0 and res.trace == {}


@pytest.mark.parametrize("h", [-2.0, -0.4, 0.0, 0.9, 1.5])
def test_double_well_envelope_matches_oracle(h):
    f = itg.double_well_integrand()
    res = env.quasiconvex_envelope(f, X0, H1(h), bracket=True)
    assert abs(res.value - dw_oracle(h)) <= 0.02 * max(1.0, dw_oracle(h))
    lo, hi = res.brackets
    assert lo <= hi + 1e-12
    assert lo == pytest.approx(dw_oracle(h), abs=1e-9)


def test_envelope_is_upper_bound_of_lower_bracket_and_below_f():
    f = itg.double_well_integrand()
    for h in (-0.7, 0.3):
        q = env.quasiconvex_envelope(f, X0, H1(h), levels=(35,)).value
        assert env.envelope_lower_bracket(f, X0, H1(h)) - 1e-12 <= q <= f.value(H1(h)) + 1e-12


def test_single_coarse_level_keeps_transition_bias():
    # one transition node among n - 2 evaluation nodes costs 1/(n - 2) at H = 0
    res = env.quasiconvex_envelope(itg.double_well_integrand(), X0, H1(0.0), levels=(35,))
    assert res.value == pytest.approx(1.0 / 33.0, abs=1e-6)
    assert res.monotone


def test_envelope_rejects_small_grid():
    with pytest.raises(ValueError):
        env.quasiconvex_envelope(itg.double_well_integrand(), X0, H1(0.0), levels=(6,))


def test_lower_bracket_is_1d_only():
    f = itg.double_well_integrand(N=2)
    with pytest.raises(NotImplementedError):
        env.envelope_lower_bracket(f, np.zeros(2), np.zeros((1, 2, 2)))


def test_envelope_recession_of_double_well():
    f = itg.double_well_integrand()
    rec = env.envelope_recession(f, X0, H1(2.0), levels=(35,))
    assert rec == pytest.approx(2.0, abs=2e-3 * 2.0)


def test_modulus_check_for_x_independent_integrand():
    f = itg.coercivize(itg.tv_integrand(), 0.0)
    assert env.envelope_modulus_check(f, X0, np.ones(1), [H1(1.0), H1(-2.0)]) == 0.0


def test_tabulate_and_backend():
    f = itg.double_well_integrand()
    tab = env.tabulate_envelope_1d(f, X0, [-2.0, 0.0, 2.0])
    np.testing.assert_allclose(tab.values, [1.0, 0.0, 1.0], atol=0.02)
    np.testing.assert_allclose(tab.lower, [1.0, 0.0, 1.0], atol=1e-12)
    with pytest.raises(ValueError):
        tab(5.0)
    with pytest.raises(ValueError):
        env.tabulate_envelope_1d(f, X0, [])
    be = env.EnvelopeBackend(f, levels=(35,))
    v1 = be.value(X0, H1(0.25))
    assert be.value(X0, H1(0.25)) == v1
    assert len(be.cache) == 1


def test_backend_falls_back_outside_table():
    f = itg.double_well_integrand()
    be = env.EnvelopeBackend(f, levels=(35,))
    be.prepare_table(X0, -0.5, 0.5, grid=[-0.5, 0.0, 0.5])
    # 3.0 lies outside the padded table and is evaluated directly
    assert be.value(X0, H1(3.0)) == pytest.approx(2.0, abs=0.02)
    n = len(be.cache)
    be.prepare_table(X0, -0.5, 3.0, grid=[-0.5, 0.0, 0.5, 3.0])
    # widening reuses cached nodes
    assert len(be.cache) <= n + 2
