from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bhrelax import extension as ex
from bhrelax import measures as ms
from bhrelax.bh_fields import BHField, Ridge, kink_1d, ridge_field


def poly_integral(coeffs, a, b):
    """Exact integral of sum c_k t^k over [a, b] with Fraction coefficients."""
    a, b = Fraction(a), Fraction(b)
    return sum(Fraction(c) * (b ** (k + 1) - a ** (k + 1)) / (k + 1) for k, c in enumerate(coeffs))


def poly_mul(p, q):
    out = [Fraction(0)] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] += Fraction(a) * Fraction(b)
    return out


def box2(lo=(-1.0, -1.0), hi=(1.0, 1.0), cells=4):
    return ms.GridDomain.box(list(lo), list(hi), cells)


# ---------------------------------------------------------------- kernel

def test_moment_kernel_by_independent_solve():
    # unknowns a, b with int psi = 1 and int lambda psi = 0 on [1, 2]
    m00, m01 = poly_integral([1], 1, 2), poly_integral([0, 1], 1, 2)
    m11 = poly_integral([0, 0, 1], 1, 2)
    det = m00 * m11 - m01 * m01
    a = m11 / det
    b = -m01 / det
    k = ex.moment_kernel()
    assert (k.a, k.b) == (a, b) == (Fraction(28), Fraction(-18))
    assert k.moment(0) == 1 and k.moment(1) == 0
    assert k.moment(2) == poly_integral(poly_mul([28, -18], [0, 0, 1]), 1, 2)


def test_broken_kernel_and_validation():
    k = ex.broken_moment_kernel()
    assert k.moment(1) != 0
    with pytest.raises(ValueError):
        ex.MomentKernel(27, -17)


# ---------------------------------------------------------------- graphs and domains

def test_piecewise_linear_graph_distance_brute_force():
    g = ex.PiecewiseLinearGraph(np.array([-1.0, 0.0, 1.0]), np.array([0.5, 0.0, 1.0]))
    rng = np.random.default_rng(0)
    y = rng.uniform(-3, 3, size=(30, 2))
    s = np.linspace(-30, 30, 600001)
    curve = np.stack([s, g(s)], axis=-1)
    brute = np.array([np.min(np.linalg.norm(curve - p, axis=-1)) for p in y])
    np.testing.assert_allclose(g.distance(y), brute, atol=1e-4)
    assert g.lipschitz() == pytest.approx(1.0)


def test_graph_validation():
    with pytest.raises(ValueError):
        ex.PiecewiseLinearGraph(np.array([0.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        ex.PiecewiseLinearGraph(np.array([1.0, 0.0]), np.array([0.0, 0.0]))


def test_domain_checks():
    with pytest.raises(NotImplementedError):
        ex.SpecialLipschitzDomain(3, lambda s: 0.0, 0.0)
    with pytest.raises(ValueError):
        ex.SpecialLipschitzDomain.from_table([-1.0, 0.0, 1.0], [0.0, 2.0, 0.0], L=1.0)
    d = ex.SpecialLipschitzDomain.from_table([-1.0, 0.0, 1.0], [0.0, 0.5, 0.0])
    assert d.L == pytest.approx(0.5)
    assert ex.SpecialLipschitzDomain.from_dict(d.to_dict()).L == d.L


def test_half_space_signed_and_regularized_distance():
    hs = ex.SpecialLipschitzDomain.half_space(2)
    x = np.array([[0.3, -0.5], [-2.0, -0.01], [1.0, -3.0]])
    np.testing.assert_allclose(ex.signed_distance(hs, x), -x[:, 1], atol=1e-14)
    res = ex.regularized_distance(hs, x)
    np.testing.assert_allclose(res.rho, -x[:, 1], atol=1e-10)


def test_wedge_distance_at_vertex_axis():
    w = ex.SpecialLipschitzDomain.wedge()
    # nearest point of the graph |s| to (0, -1) is the vertex
    s = np.linspace(-3, 3, 600001)
    brute = float(np.min(np.hypot(s, np.abs(s) + 1.0)))
    assert brute == pytest.approx(1.0, abs=1e-9)
    assert float(ex.signed_distance(w, np.array([[0.0, -1.0]]))[0]) == pytest.approx(1.0, abs=1e-9)
    # and to (1, 0) it lies on a face: 1/sqrt 2
    assert float(ex.signed_distance(w, np.array([[1.0, 0.0]]))[0]) == pytest.approx(1 / np.sqrt(2), abs=1e-9)


def test_wedge_fixed_point_and_slope():
    w = ex.SpecialLipschitzDomain.wedge()
    rng = np.random.default_rng(7)
    s = rng.uniform(-1, 1, 100)
    x = np.stack([s, np.abs(s) - rng.uniform(0.05, 1.0, 100)], axis=-1)
    res = ex.regularized_distance(w, x)
    assert np.all(res.residual < 1e-8) and np.all(res.iterations <= 30)
    d = ex.signed_distance(w, x)
    # comparable to the distance
    assert np.all(res.rho > 0.2 * d) and np.all(res.rho < 5 * d)
    assert float(np.max(ex.vertical_slope(w, x))) <= -1 / 3 + 1e-3


def test_regularized_distance_gradient_matches_fd():
    w = ex.SpecialLipschitzDomain.wedge()
    x = np.array([[0.2, -0.4], [-0.5, -0.1]])
    res = ex.regularized_distance(w, x)
    g = ex.regularized_distance_grad(w, x, res.rho)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (ex.regularized_distance(w, x + e, tol=1e-13).rho - ex.regularized_distance(w, x - e, tol=1e-13).rho) / (2 * h)
        np.testing.assert_allclose(g[:, k], fd, atol=1e-6)


# ---------------------------------------------------------------- operator

def affine_field(N=2):
    return BHField(box2(), 1, {(0, 0): [0.7], (1, 0): [-0.4], (0, 1): [1.3]})


def test_affine_reproduction_half_space():
    hs = ex.SpecialLipschitzDomain.half_space(2)
    u = affine_field()
    x = np.stack([np.linspace(-1, 1, 25), -np.linspace(0.01, 2, 25)], axis=-1)
    e = ex.extend(u, hs, x)
    np.testing.assert_allclose(e.values, u.value(x), atol=1e-10)
    np.testing.assert_allclose(e.grads, u.grad(x), atol=1e-10)


def test_affine_reproduction_wedge():
    w = ex.SpecialLipschitzDomain.wedge()
    u = affine_field()
    s = np.linspace(-0.8, 0.8, 17)
    x = np.stack([s, np.abs(s) - 0.3], axis=-1)
    e = ex.extend(u, w, x)
    np.testing.assert_allclose(e.values, u.value(x), atol=1e-10)


def test_quadratic_extension_matches_exact_integral():
    kappa = 2
    # u(x) = x_N^2 at x_N = -s: lookup x_N + lambda kappa s = s (kappa lambda - 1)
    factor = poly_integral(poly_mul([28, -18], poly_mul([-1, kappa], [-1, kappa])), 1, 2)
    assert factor == Fraction(-23, 3)
    hs = ex.SpecialLipschitzDomain.half_space(2)
    u = BHField(box2(), 1, {(0, 2): [1.0]})
    x = np.stack([np.linspace(-1, 1, 9), -np.linspace(0.1, 1.5, 9)], axis=-1)
    e = ex.ExtensionOperator(hs, kappa=float(kappa)).apply(u, x)
    np.testing.assert_allclose(e.values[:, 0], float(factor) * x[:, 1] ** 2, atol=1e-8)


def test_broken_kernel_breaks_affine_reproduction():
    hs = ex.SpecialLipschitzDomain.half_space(2)
    u = affine_field()
    x = np.array([[0.0, -0.5]])
    e = ex.ExtensionOperator(hs, ex.broken_moment_kernel()).apply(u, x)
    assert abs(float(e.values[0, 0] - u.value(x)[0, 0])) > 1e-3


def test_explicit_bad_kappa_is_rejected():
    with pytest.raises(ValueError):
        ex.ExtensionOperator(ex.SpecialLipschitzDomain.wedge(), kappa=0.5)


def test_default_kappa_evidence():
    op = ex.ExtensionOperator(ex.SpecialLipschitzDomain.wedge())
    assert op.kappa in (6.0, 12.0)
    assert op.evidence["max_slope"] <= ex.SLOPE_TARGET + 1e-6
    assert op.evidence["min_clearance"] > 0


def test_boundary_jump_and_trace_for_quadratic():
    hs = ex.SpecialLipschitzDomain.half_space(2)
    u = BHField(box2(), 1, {(0, 2): [1.0], (2, 0): [0.5]})
    op = ex.ExtensionOperator(hs)
    pts = np.array([[0.0, 0.0], [0.5, 0.0]])
    assert float(np.max(ex.boundary_jump(u, op, pts))) < 1e-5
    table = ex.trace_gap(u, op, 2.0 ** -np.arange(3, 15), pts)
    assert table.decreasing()
    assert table.passed(1e-3)


def test_trace_gap_of_quadratic_in_1d():
    dom1 = ex.SpecialLipschitzDomain(1, 0.0, 0.0)
    u = BHField(ms.GridDomain.box([0.0], [1.0], 16), 1, {(1,): [2.0], (2,): [1.0]})
    table = ex.trace_gap(u, dom1, 2.0 ** -np.arange(2, 18), np.array([[0.0]]))
    assert table.passed(1e-3)
    # gradient gaps are first order in r
    ratio = table.grad_gaps[1:] / table.grad_gaps[:-1]
    np.testing.assert_allclose(ratio, 0.5, atol=0.05)


# ---------------------------------------------------------------- bounded boxes

def test_bounded_extension_reproduces_affine_in_box_exterior():
    u = BHField(box2((0.0, 0.0), (1.0, 1.0)), 1, {(0, 0): [1.0], (1, 0): [2.0], (0, 1): [-1.0]})
    ext = ex.BoundedExtension(u, [0.0, 0.0], [1.0, 1.0])
    x = np.array([[-0.05, 0.5], [1.05, 0.2], [-0.05, -0.05], [1.04, 1.03], [0.5, 0.5]])
    np.testing.assert_allclose(ext.value(x), u.value(x), atol=1e-10)
    np.testing.assert_allclose(ext.grad(x), u.grad(x), atol=1e-9)


def test_bounded_extension_interval_has_no_boundary_mass():
    u = kink_1d()
    ext = ex.extend_bounded(u, [0.0], [1.0])
    assert ext.boundary_jump_mass() < 1e-6
    x = np.array([[-0.03], [1.03]])
    assert np.all(np.isfinite(ext.value(x)))


def test_smooth_approximation_kink():
    rep = ex.smooth_approximation(kink_1d(), [16, 64, 256])
    areas = [t.area for t in rep.terms]
    assert rep.area_target == pytest.approx(3.0, abs=1e-12)
    assert areas[0] < areas[1] < areas[2] < 3.0
    assert rep.final_area_gap < 0.01
    assert np.max(rep.terms[-1].weakstar) < 1e-3
    assert rep.boundary_mass < 1e-6
    assert rep.terms[-1].w11_gap < rep.terms[0].w11_gap


def test_single_term_schedule():
    rep = ex.smooth_approximation(kink_1d(), [32])
    assert len(list(rep.rows())) == 1


def test_boundary_charge_rejected():
    u = ridge_field(box2((0.0, 0.0), (1.0, 1.0), 8), [1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        ex.smooth_approximation(u, [8])


def test_smooth_step_partition():
    t = np.linspace(-0.5, 1.5, 201)
    v = ex.smooth_step(t)
    v = v[0] if isinstance(v, tuple) else v
    assert np.all((v >= 0) & (v <= 1))
    assert np.all(np.diff(v) >= -1e-15)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 2.0), st.floats(-1, 1))
def test_affine_reproduction_property(c0, c1, c2, depth, s):
    hs = ex.SpecialLipschitzDomain.half_space(2)
    u = BHField(box2(), 1, {(0, 0): [c0], (1, 0): [c1], (0, 1): [c2]})
    x = np.array([[s, -depth]])
    e = ex.extend(u, hs, x)
    assert abs(float(e.values[0, 0] - u.value(x)[0, 0])) < 1e-10 * max(1.0, abs(c0) + abs(c1) + abs(c2))


@pytest.mark.slow
def test_smooth_approximation_oblique_ridge_2d():
    nu = np.array([1.0, 0.3]) / np.hypot(1.0, 0.3)
    u = ridge_field(box2((0.0, 0.0), (1.0, 1.0), 8), nu, 0.55)
    rep = ex.smooth_approximation(u, [16, 64])
    # area = |box| + length of the ridge segment inside the unit square
    length = 1.0 / abs(nu[0])
    assert rep.area_target == pytest.approx(1.0 + length, rel=1e-12)
    assert rep.terms[0].area < rep.terms[1].area
    assert rep.final_area_gap < 0.02
    assert rep.boundary_mass < 1e-6
