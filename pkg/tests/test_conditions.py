import numpy as np
import pytest

from fbsde_singular import adjoint, conditions, model, simulate, variation
from fbsde_singular.adjoint import SingularAdjoint
from fbsde_singular.simulate import McConfig
from conftest import scalar_problem


def test_example_hamiltonians_at_origin(example):
    rec = conditions.eval_hamiltonians(example, 0.3, [[0.0]], 0.0, 0.0, [[0.0]],
                                       [[0.0]], [[0.0]], [[1.0]], [[0.0]])
    assert rec.hu_u[0, 0] == 0.0
    assert rec.mixed[0, 0, 0] == 1.0
    assert rec.H_u[0, 0] == 0.0
    # P sigma_u^2 + f_uu = 1 + 2 with the oracle Hessian of u^2
    assert rec.hu_uu[0, 0, 0] == 3.0


def test_hamiltonian_gradient_quadratic_model():
    coeffs = model.linear_quadratic(B=[[1.0]], Hf=np.diag([0.0, 0.0, 0.0, 1.0]))
    p = scalar_problem(coeffs)
    u = np.array([[-1.0], [0.0], [0.5]])
    rec = conditions.eval_hamiltonians(p, 0.0, np.zeros((3, 1)), 0.0, 0.0, u,
                                       np.ones((3, 1)), np.zeros((3, 1)), np.zeros((3, 1, 1)),
                                       np.zeros((3, 1, 1)))
    np.testing.assert_allclose(rec.H_u[:, 0], 1 + u[:, 0])
    np.testing.assert_allclose(rec.H_uu[:, 0, 0], 1.0)


def test_no_control_dependence_gives_zero_gradient():
    p = scalar_problem(model.affine(A=[[1.0]], s0=[0.3], fx=[1.0]))
    rec = conditions.eval_hamiltonians(p, 0.0, [[0.2]], 0.0, 0.0, [[0.4]],
                                       [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    assert rec.H_u[0, 0] == 0.0


def test_example_singular_optimality(example_solved):
    c = example_solved["problem"].coeffs
    rep = conditions.check_singular_optimality(example_solved["sing"], c.G, c.K,
                                               example_solved["xi"])
    assert rep.passed and rep.min_margin == 1.0 and rep.complementarity_residual == 0.0


def _big_k_adjoint(n_paths=1000):
    p = model.make_big_k()
    mc = McConfig(n_paths, 0)
    fwd = simulate.simulate_forward(p, 0.0, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    return p, fwd, adjoint.solve_singular_adjoint(p, fwd, bwd, mc)


def test_big_k_margin_and_injection():
    p, fwd, sing = _big_k_adjoint()
    c = p.coeffs
    rep = conditions.check_singular_optimality(sing, c.G, c.K, None)
    assert rep.passed and rep.min_margin > 0
    bad = model.SingularControlPath.atom(p.grid.n_steps, 10, 0.7)
    rep = conditions.check_singular_optimality(sing, c.G, c.K, bad)
    assert not rep.passed
    assert rep.complementarity_residual == pytest.approx(0.7)
    assert rep.diagnostics["misplaced_mass_per_step"][10] == pytest.approx(0.7)


@pytest.mark.parametrize("c_val", [0.3, 2.0])
def test_constant_adjoint_margin(c_val):
    K = 2.0
    sing = SingularAdjoint(frak_p=np.full((2, 5, 1), c_val), frak_q=np.ones((2, 5)),
                           frak_k=np.zeros((1, 5, 1)))
    m = conditions.singular_margin(sing, [[1.0]], [K])
    np.testing.assert_allclose(m, K - c_val)
    if c_val == K:
        rep = conditions.check_singular_optimality(sing, [[1.0]], [K], np.array([[3.0]]))
        assert rep.passed


def test_margin_zero_allows_any_mass():
    sing = SingularAdjoint(frak_p=np.full((2, 5, 1), 2.0), frak_q=np.ones((2, 5)),
                           frak_k=np.zeros((1, 5, 1)))
    rep = conditions.check_singular_optimality(sing, [[1.0]], [2.0], np.array([[3.0]]))
    assert rep.min_margin == 0.0 and rep.passed


def test_time_dependent_G_needs_times():
    sing = SingularAdjoint(frak_p=np.ones((2, 3, 1)), frak_q=np.ones((2, 3)),
                           frak_k=np.zeros((1, 3, 1)))
    with pytest.raises(ValueError, match="grid times"):
        conditions.singular_margin(sing, lambda t: [[t]], [1.0])
    m = conditions.singular_margin(sing, lambda t: [[t]], [1.0], times=np.array([0.0, 1.0]))
    np.testing.assert_allclose(m[:, 0, 0], [1.0, 0.0])


def test_classical_singularity_reduced_case():
    # H = p u + u^2 / 2 with sigma free of u and f free of z
    coeffs = model.linear_quadratic(B=[[1.0]], Hf=np.diag([0.0, 0.0, 0.0, 1.0]))
    p = scalar_problem(coeffs)
    first, second, _ = conditions.singularity_residuals(p, 0.0, [[0.0]], 0.0, 0.0, [[0.0]],
                                                        [[0.0]], [[0.0]], [[0.0]], [[0.0]])
    assert first[0, 0] == 0.0
    # the H_uu = 1 part remains
    assert second[0, 0, 0] == 1.0


def test_classical_singularity_nonzero_first_residual():
    p = scalar_problem(model.affine(B=[[1.0]], D=[[1.0]], c_phi=[1.0]))
    first, _, _ = conditions.singularity_residuals(p, 0.0, [[0.0]], 0.0, 0.0, [[0.0]],
                                                   [[1.0]], [[0.0]], [[0.0]], [[0.0]])
    assert first[0, 0] == 1.0


def test_classical_singularity_report_on_example(example_solved):
    s = example_solved
    rep = conditions.check_classical_singularity(s["problem"], s["fwd"], s["bwd"], s["cls"])
    d = rep.diagnostics
    assert d["residual_i"] <= 1e-8
    assert d["equivalence_discrepancy"] <= 1e-8
    assert d["residual_ii"] == pytest.approx(3.0, abs=1e-8)
    assert not rep.passed


def test_variational_value_example(example_solved):
    s = example_solved
    var = variation.solve_regular_variations(s["problem"], s["fwd"], 1.0)
    vi = conditions.variational_inequality_value(s["problem"], s["fwd"], s["bwd"], s["cls"],
                                                 var, 1.0)
    # E int x1 ds on the left-point grid: sum_k t_k dt
    t = s["fwd"].times[:-1]
    assert abs(vi.mixed_integral - np.sum(t) * s["fwd"].dt) <= 3 * vi.mixed_se + 1e-12
    assert abs(vi.mixed_integral - 0.5) <= 3 * vi.mixed_se + s["fwd"].dt
    zero = conditions.variational_inequality_value(
        s["problem"], s["fwd"], s["bwd"], s["cls"],
        variation.solve_regular_variations(s["problem"], s["fwd"], 0.0), 0.0)
    assert zero.value == 0.0
    with pytest.raises(ValueError):
        conditions.variational_inequality_value(s["problem"], s["fwd"], s["bwd"], s["cls"],
                                                var, 1.0, eps=0.0)


def test_zero_mixed_hamiltonian_gives_zero_integral():
    p = scalar_problem(model.affine(B=[[1.0]], s0=[0.3], c_phi=[1.0]), n_steps=20)
    mc = McConfig(300, 0)
    fwd = simulate.simulate_forward(p, 0.0, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    cls = adjoint.solve_classical_adjoints(p, fwd, bwd, mc)
    for v in (1.0, -0.5):
        var = variation.solve_regular_variations(p, fwd, v)
        vi = conditions.variational_inequality_value(p, fwd, bwd, cls, var, v)
        assert vi.mixed_integral == 0.0


def test_pointwise_m1_example(example_solved):
    s = example_solved
    tm, _ = variation.transition_and_representation(s["problem"], s["fwd"], 1.0)
    rep = conditions.pointwise_m1(s["problem"], s["fwd"], s["bwd"], s["cls"], tm, 1.0,
                                  alphas=[0.04, 0.02], steps=[5, 20], kernel_degree=1)
    np.testing.assert_allclose(rep.diagnostics["first_term"], 1.0, atol=1e-12)
    assert np.abs(rep.diagnostics["derivative_term_per_alpha"]).max() <= 1e-8
    np.testing.assert_allclose(rep.lhs, 1.0, atol=1e-8)
    same = conditions.pointwise_m1(s["problem"], s["fwd"], s["bwd"], s["cls"], tm, 0.0,
                                   alphas=[0.02], steps=[5], kernel_degree=1)
    assert np.abs(same.lhs).max() <= 1e-12
    with pytest.raises(ValueError, match="alpha list"):
        conditions.pointwise_m1(s["problem"], s["fwd"], s["bwd"], s["cls"], tm, 0.0, alphas=[])


@pytest.mark.parametrize("u", [-1.0, -0.5, 0.0, 0.5, 1.0])
def test_pointwise_m2_example(example_solved, u):
    s = example_solved
    zero = np.zeros_like(s["fwd"].dW)
    rep = conditions.pointwise_m2(s["problem"], s["fwd"], s["bwd"], s["cls"], u, zero, zero)
    np.testing.assert_allclose(rep.lhs, u ** 2, atol=1e-8)


def test_pointwise_m2_needs_malliavin_inputs(example_solved):
    s = example_solved
    with pytest.raises(ValueError, match="nabla_u_bar"):
        conditions.pointwise_m2(s["problem"], s["fwd"], s["bwd"], s["cls"], 0.5, 0.0, None)


def test_duality_identity_unit_atom():
    p = model.make_duality_test()
    mc = McConfig(500, 0)
    fwd = simulate.simulate_forward(p, 0.0, None, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    sing = adjoint.solve_singular_adjoint(p, fwd, bwd, mc)
    xi = model.SingularControlPath.atom(p.grid.n_steps, 4, 1.0)
    var = variation.solve_singular_variation(p, fwd, bwd, xi, None, mc)
    chk = conditions.duality_check(p, sing, float(var.y1[0].mean()), var.y1_se, xi, None,
                                   fwd.times)
    assert chk.passed and chk.lhs == pytest.approx(2.0) and chk.rhs == pytest.approx(2.0)


def test_report_json_roundtrip(example_solved):
    c = example_solved["problem"].coeffs
    rep = conditions.check_singular_optimality(example_solved["sing"], c.G, c.K, None)
    d = rep.to_dict()
    assert d["passed"] is True and isinstance(d["diagnostics"]["per_time_min_margin"], list)


def test_default_tolerance():
    assert conditions.default_tolerance() == 1e-6
    assert conditions.default_tolerance(0.1) == pytest.approx(0.3)
