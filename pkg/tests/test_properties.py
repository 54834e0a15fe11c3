"""Invariants checked over randomly drawn inputs."""
import numpy as np
from hypothesis import given, settings, strategies as st

from fbsde_singular import adjoint, conditions, hjb, model, rng, simulate, variation
from fbsde_singular.adjoint import SingularAdjoint
from fbsde_singular.malliavin import malliavin_derivative_fd
from fbsde_singular.simulate import McConfig, Regression
from conftest import scalar_problem

FAST = settings(max_examples=25, deadline=None)
coef = st.floats(-1.0, 1.0, allow_nan=False)


@FAST
@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 40), m=st.integers(1, 20))
def test_streams_prefix_stable(seed, n, m):
    big = rng.brownian_increments(seed, n + 3, m + 2, 0.1)
    np.testing.assert_array_equal(big[:m, :n], rng.brownian_increments(seed, n, m, 0.1))


@FAST
@given(a=coef, s=st.floats(0.0, 1.0), shift=st.floats(0.0, 2.0), seed=st.integers(0, 1000))
def test_comparison_in_terminal_cost(a, s, shift, seed):
    mc = McConfig(200, seed)
    lo = scalar_problem(model.affine(A=[[a]], s0=[s], fy=0.5, c_phi=[1.0]), n_steps=10)
    hi = scalar_problem(model.affine(A=[[a]], s0=[s], fy=0.5, c_phi=[1.0], phi0=shift),
                        n_steps=10)
    y_lo = simulate.evaluate_cost(lo, 0.0, mc=mc).backward.Y
    y_hi = simulate.evaluate_cost(hi, 0.0, mc=mc).backward.Y
    assert np.all(y_hi >= y_lo - 1e-10)


@FAST
@given(K=st.floats(0.1, 5.0), factor=st.floats(1.0, 4.0), mass=st.floats(0.0, 2.0))
def test_cost_monotone_in_singular_cost(K, factor, mass):
    mc = McConfig(100, 0)
    xi = model.SingularControlPath.atom(10, 3, mass)
    lo = scalar_problem(model.affine(s0=[0.3], c_phi=[1.0], G=[[1.0]], K=[K]), n_steps=10)
    hi = scalar_problem(model.affine(s0=[0.3], c_phi=[1.0], G=[[1.0]], K=[K * factor]),
                        n_steps=10)
    assert (simulate.evaluate_cost(hi, 0.0, xi, mc).J
            >= simulate.evaluate_cost(lo, 0.0, xi, mc).J - 1e-12)


@FAST
@given(fy=coef, fz=coef, seed=st.integers(0, 1000))
def test_exponential_weight_positive(fy, fz, seed):
    p = scalar_problem(model.affine(s0=[1.0], fy=fy, fz=fz, c_phi=[1.0]), n_steps=10)
    mc = McConfig(100, seed)
    fwd = simulate.simulate_forward(p, 0.0, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    sing = adjoint.solve_singular_adjoint(p, fwd, bwd, mc)
    assert np.all(sing.frak_q > 0)
    assert np.all(sing.frak_q[0] == 1.0)
    np.testing.assert_array_equal(sing.frak_p[-1, :, 0], -sing.frak_q[-1])


@FAST
@given(scale=st.floats(0.1, 10.0), p_val=st.floats(-3.0, 3.0), K=st.floats(0.1, 3.0),
       mass=st.floats(0.0, 1.0))
def test_margin_scaling(scale, p_val, K, mass):
    sing = SingularAdjoint(frak_p=np.full((3, 4, 1), p_val), frak_q=np.ones((3, 4)),
                           frak_k=np.zeros((2, 4, 1)))
    xi = np.array([[mass], [0.0]])
    a = conditions.check_singular_optimality(sing, [[1.0]], [K], xi)
    b = conditions.check_singular_optimality(sing, [[scale]], [K * scale], xi, tol=a.tol * scale)
    np.testing.assert_allclose(conditions.singular_margin(sing, [[scale]], [K * scale]),
                               scale * conditions.singular_margin(sing, [[1.0]], [K]), rtol=1e-12)
    assert a.passed == b.passed


@FAST
@given(u=st.floats(-1.0, 1.0), seed=st.integers(0, 100))
def test_second_pointwise_zero_at_reference(u, seed):
    p = model.make_quadratic_example(n_steps=10)
    mc = McConfig(50, seed)
    fwd = simulate.simulate_forward(p, u, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    cls = adjoint.solve_classical_adjoints(p, fwd, bwd, mc)
    g = np.random.default_rng(seed)
    rep = conditions.pointwise_m2(p, fwd, bwd, cls, u, g.normal(size=fwd.dW.shape),
                                  g.normal(size=fwd.dW.shape))
    assert np.all(rep.lhs == 0.0)


@FAST
@given(theta=st.integers(0, 19), a=st.floats(0.0, 1.0))
def test_malliavin_adapted(theta, a):
    dW = rng.brownian_increments(0, 5, 20, 0.05)

    def fn(d):
        X = np.ones((21, d.shape[1]))
        for k in range(20):
            X[k + 1] = X[k] * (1 + a * d[k])
        return X
    D = malliavin_derivative_fd(fn, dW, theta, 0.05)
    assert not D[:theta + 1].any()


@FAST
@given(c0=coef, c1=coef, c2=coef, c3=coef, seed=st.integers(0, 1000))
def test_regression_reproduces_cubics(c0, c1, c2, c3, seed):
    x = np.random.default_rng(seed).normal(size=(200, 1))
    y = c0 + c1 * x[:, 0] + c2 * x[:, 0] ** 2 + c3 * x[:, 0] ** 3
    np.testing.assert_allclose(Regression(x, 3).fit(y), y, atol=1e-8)


@FAST
@given(inc=st.lists(st.floats(0.0, 3.0), min_size=2, max_size=10), alpha=st.floats(0.0, 1.0))
def test_singular_paths_stay_admissible(inc, alpha):
    a = model.SingularControlPath(np.array(inc))
    b = model.SingularControlPath(np.array(inc[::-1]))
    mix = model.convex_combination(a, b, alpha)
    assert np.all(mix.increments >= 0)
    assert np.all(np.diff(mix.cumulative[:, 0]) >= 0)


@FAST
@given(mass=st.floats(0.01, 2.0), step=st.integers(0, 9), seed=st.integers(0, 100))
def test_singular_variation_linear(mass, step, seed):
    p = model.make_big_k(n_steps=10)
    mc = McConfig(100, seed)
    fwd = simulate.simulate_forward(p, 0.0, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    one = variation.solve_singular_variation(
        p, fwd, bwd, model.SingularControlPath.atom(10, step, mass), None, mc)
    two = variation.solve_singular_variation(
        p, fwd, bwd, model.SingularControlPath.atom(10, step, 2 * mass), None, mc)
    np.testing.assert_allclose(two.x1, 2 * one.x1, atol=1e-12)
    np.testing.assert_allclose(two.y1, 2 * one.y1, atol=1e-8 * (1 + np.abs(one.y1).max()))


@FAST
@given(slope=st.floats(-3.0, 3.0), K=st.floats(0.2, 2.0), s=st.floats(0.0, 0.5))
def test_hjb_gradient_constraint_and_residual(slope, K, s):
    p = scalar_problem(model.affine(s0=[s], c_phi=[slope], G=[[1.0]], K=[K]), n_steps=10)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(-1.0, 1.0, 21))
    assert hjb.complementarity_residual(vg, p).residual <= 1e-8
    # K + v_x G >= 0 away from the terminal slice
    grad = np.diff(vg.v[:-1], axis=1) / vg.h
    assert np.all(K + grad >= -1e-8)
    assert np.all(vg.v[:-1] <= vg.v[-1][None, :] + 1e-10)


@settings(max_examples=10, deadline=None)
@given(slope=st.floats(-3.0, 0.0), factor=st.floats(1.0, 3.0))
def test_hjb_monotone_in_singular_cost(slope, factor):
    p = scalar_problem(model.affine(s0=[0.2], c_phi=[slope], G=[[1.0]], K=[1.0]), n_steps=10)
    assert hjb.k_monotonicity(p, hjb.SpatialGrid(-1.0, 1.0, 21), factor) >= -1e-10
