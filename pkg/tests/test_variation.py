import json

import numpy as np
import pytest

from fbsde_singular import model, simulate, variation
from fbsde_singular.simulate import McConfig
from conftest import scalar_problem


def _paths(p, n_paths=2000, seed=0, xi=None):
    mc = McConfig(n_paths, seed)
    fwd = simulate.simulate_forward(p, 0.0, xi, mc)
    return mc, fwd, simulate.solve_bsde(p, fwd, mc)


def test_example_first_variation_mean(example_solved):
    var = variation.solve_regular_variations(example_solved["problem"], example_solved["fwd"], 1.0)
    fwd = example_solved["fwd"]
    # x1[k] = t_k + W_{t_k}
    np.testing.assert_allclose(var.x1[..., 0], fwd.times[:, None] + fwd.W, atol=1e-12)
    end = var.x1[-1, :, 0]
    assert abs(end.mean() - 1.0) <= 3 * end.std(ddof=1) / np.sqrt(end.size)
    assert np.abs(var.x2).max() == 0.0


def test_zero_direction(example_solved):
    var = variation.solve_regular_variations(example_solved["problem"], example_solved["fwd"], 0.0)
    assert not var.x1.any() and not var.x2.any()


def test_linear_drift_representation():
    a = 0.8
    p = scalar_problem(model.affine(A=[[a]], B=[[1.0]]), n_steps=1000)
    mc, fwd, bwd = _paths(p, n_paths=20)
    tm, x1 = variation.transition_and_representation(p, fwd, 1.0)
    exact = (np.exp(a) - 1) / a
    assert abs(x1[-1, 0, 0] / exact - 1) <= 2 * p.grid.dt
    np.testing.assert_allclose(tm.psi @ tm.psi_inv, np.broadcast_to(np.eye(1), tm.psi.shape),
                               atol=1e-8)


def test_representation_matches_recursion_on_example(example_solved):
    p, fwd = example_solved["problem"], example_solved["fwd"]
    tm, x1 = variation.transition_and_representation(p, fwd, 1.0)
    np.testing.assert_array_equal(tm.psi, 1.0)
    var = variation.solve_regular_variations(p, fwd, 1.0)
    assert np.abs(x1 - var.x1).max() <= 1e-10


def test_representation_converges_at_first_order():
    errs = []
    levels = [50, 100, 200, 400]
    for n in levels:
        p = scalar_problem(model.affine(A=[[0.3]], B=[[1.0]], C=[[0.4]], D=[[0.5]], s0=[0.2]),
                           n_steps=n)
        mc, fwd, bwd = _paths(p, n_paths=1000)
        _, x1 = variation.transition_and_representation(p, fwd, 1.0)
        var = variation.solve_regular_variations(p, fwd, 1.0)
        errs.append(variation._sup_l2(x1 - var.x1))
    assert variation.fit_slope([1.0 / n for n in levels], errs) >= 0.8


def test_near_singular_transition_reported():
    dt = 0.1
    coeffs = model.affine(2, 1, 1, A=np.diag([0.0, -(1 - 1e-10) / dt]), G=[[1.0], [0.0]])
    p = model.Problem(coeffs, model.ControlRegion([-1.0], [1.0]), model.TimeGrid(0, 1, 10),
                      np.zeros(2))
    mc, fwd, bwd = _paths(p, n_paths=20)
    with pytest.raises(np.linalg.LinAlgError, match="near singular .* at step 1, path 0"):
        variation.transition_and_representation(p, fwd, 1.0)


def test_singular_variation_zero_perturbation():
    p = model.make_duality_test()
    xi = model.SingularControlPath.atom(p.grid.n_steps, 3, 1.0)
    mc, fwd, bwd = _paths(p, 100, xi=xi)
    var = variation.solve_singular_variation(p, fwd, bwd, xi, xi, mc)
    assert not var.x1.any() and not var.y1.any() and not var.z1.any()


def test_singular_variation_unit_atom():
    p = model.make_duality_test()
    mc, fwd, bwd = _paths(p, 100)
    xi = model.SingularControlPath.atom(p.grid.n_steps, 3, 1.0)
    var = variation.solve_singular_variation(p, fwd, bwd, xi, None, mc)
    np.testing.assert_array_equal(var.x1[4:, :, 0], 1.0)
    np.testing.assert_array_equal(var.x1[:4, :, 0], 0.0)
    # phi_x x1(T) plus the pushed cost K; matches the cost change of the atom
    np.testing.assert_allclose(var.y1[0], 2.0)
    np.testing.assert_allclose(var.y1[-1], var.x1[-1, :, 0])


def test_singular_variation_without_terminal_cost():
    coeffs = model.affine(G=[[1.0]], K=[1.0])
    p = scalar_problem(coeffs, n_steps=10)
    mc, fwd, bwd = _paths(p, 100)
    xi = model.SingularControlPath.atom(10, 5, 1.0)
    var = variation.solve_singular_variation(p, fwd, bwd, xi, None, mc)
    np.testing.assert_allclose(var.y1[0], 1.0)


def test_singular_variation_linear_in_perturbation():
    p = model.make_big_k(n_steps=20)
    mc, fwd, bwd = _paths(p, 500)
    one = model.SingularControlPath.atom(20, 5, 0.5)
    two = model.SingularControlPath.atom(20, 5, 1.0)
    a = variation.solve_singular_variation(p, fwd, bwd, one, None, mc)
    b = variation.solve_singular_variation(p, fwd, bwd, two, None, mc)
    np.testing.assert_allclose(b.x1, 2 * a.x1, atol=1e-12)
    np.testing.assert_allclose(b.y1, 2 * a.y1, atol=1e-9)
    np.testing.assert_allclose(b.z1, 2 * a.z1, atol=1e-9)


def test_linear_regular_study_is_exact():
    p = scalar_problem(model.affine(A=[[0.2]], B=[[1.0]], C=[[0.1]], D=[[0.3]], s0=[0.2]),
                       n_steps=20)
    res = variation.convergence_study(p, "regular", [0.2, 0.1, 0.05], McConfig(200, 0))
    assert max(res.norms["first_order"]) <= 1e-13
    assert res.exact["first_order"]


def test_example_regular_study_slopes(example):
    res = variation.convergence_study(example.with_grid(n_steps=50), "regular",
                                      [0.2, 0.1, 0.05, 0.025], McConfig(2000, 0))
    # linear dynamics: both state remainders vanish
    assert res.exact["first_order"] and res.exact["second_order"]
    assert res.slopes["y_hat_sq"] >= 1.8


def test_singular_study_exact_on_affine():
    p = model.make_duality_test()
    xi = model.SingularControlPath.atom(p.grid.n_steps, 4, 1.0)
    res = variation.convergence_study(p, "singular", [0.5, 0.25, 0.125], McConfig(100, 0), xi=xi)
    assert max(res.norms["quotient_error"]) <= 1e-10


def test_study_deterministic_given_seed(example):
    p = example.with_grid(n_steps=20)
    a = variation.convergence_study(p, "regular", [0.2, 0.1, 0.05], McConfig(300, 4))
    b = variation.convergence_study(p, "regular", [0.2, 0.1, 0.05], McConfig(300, 4))
    assert a.to_dict() == b.to_dict()


def test_study_input_errors(example):
    with pytest.raises(ValueError, match="at least 3 levels"):
        variation.convergence_study(example, "regular", [0.1, 0.05])
    with pytest.raises(ValueError, match="strictly decreasing"):
        variation.convergence_study(example, "regular", [0.1, 0.2, 0.05])
    with pytest.raises(ValueError, match="unknown study kind"):
        variation.convergence_study(example, "both", [0.2, 0.1, 0.05], McConfig(10, 0))
    with pytest.raises(ValueError, match="control region"):
        variation.convergence_study(example, "regular", [3.0, 2.0, 1.5], McConfig(10, 0),
                                    u_bar=0.5)


def test_fit_slope():
    lv = [0.4, 0.2, 0.1]
    assert variation.fit_slope(lv, [x ** 2 for x in lv]) == pytest.approx(2.0)
    assert variation.fit_slope(lv, [0.0, 0.0, 0.0]) == float("inf")


def test_write_study(tmp_path, example):
    res = variation.convergence_study(example.with_grid(n_steps=10), "regular", [0.2, 0.1, 0.05],
                                      McConfig(100, 0))
    variation.write_study(res, tmp_path / "s.csv", tmp_path / "s.json")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "level,norm_name,value" and len(rows) == 1 + 3 * 5
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["schema"] == 1 and doc["slopes"]["first_order"] == "inf"
