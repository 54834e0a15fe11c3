import csv

import numpy as np
import pytest

from fbsde_singular import adjoint, hjb, model, simulate
from fbsde_singular.simulate import McConfig
from conftest import scalar_problem


@pytest.fixture(scope="module")
def example_grid():
    p = model.make_quadratic_example(n_steps=100)
    return p, hjb.solve_hjb_vi(p, hjb.SpatialGrid(-2.0, 2.0, 101))


def test_spatial_grid():
    g = hjb.SpatialGrid(-1.0, 1.0, 5)
    assert g.h == 0.5
    np.testing.assert_allclose(g.points, [-1, -0.5, 0, 0.5, 1])
    with pytest.raises(ValueError):
        hjb.SpatialGrid(1.0, -1.0, 5)
    with pytest.raises(ValueError):
        hjb.SpatialGrid(0.0, 1.0, 2)


def test_running_cost_value_is_time_to_go():
    p = model.make_running_cost(n_steps=50)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(-1.0, 1.0, 21))
    np.testing.assert_allclose(vg.v, np.broadcast_to((1 - vg.times)[:, None], vg.v.shape),
                               atol=1e-12)
    assert not vg.push_mask.any()
    assert hjb.complementarity_residual(vg, p).residual <= 1e-10


def test_three_point_obstacle():
    # phi = -2x, G = K = 1: pushing to the right end costs 1 - x and earns -2
    p = scalar_problem(model.affine(c_phi=[-2.0], G=[[1.0]], K=[1.0]), n_steps=4)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(0.0, 1.0, 3))
    np.testing.assert_allclose(vg.v[:-1], np.tile([-1.0, -1.5, -2.0], (4, 1)), atol=1e-12)
    np.testing.assert_array_equal(vg.push_mask[:-1], np.tile([True, True, False], (4, 1)))
    assert not vg.push_mask[-1].any()
    assert hjb.complementarity_residual(vg, p).residual == 0.0
    assert hjb.obstacle_consistency(vg, p)["passed"]
    assert vg.free_boundary()[0] == [0.75]


def test_push_feedback_moves_to_continuation():
    p = scalar_problem(model.affine(c_phi=[-2.0], G=[[1.0]], K=[1.0]), n_steps=4)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(0.0, 1.0, 3))
    fb = hjb.extract_feedback(vg, p)
    inc = fb.push.increment(0, 0.0, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(inc[:, 0], [1.0, 0.5, 0.0])


def test_example_value_and_feedback(example_grid):
    p, vg = example_grid
    i0 = int(np.argmin(np.abs(vg.x)))
    assert abs(vg.v[0, i0]) <= 1e-12
    assert hjb.complementarity_residual(vg, p).residual <= 1e-6
    fb = hjb.extract_feedback(vg, p)
    assert np.abs(fb.control.table[:, i0]).max() == 0.0
    assert not vg.push_mask.any()
    np.testing.assert_allclose(vg.v[-1], 0.5 * vg.x ** 2)


def test_example_value_bounded_by_zero_control(example_grid):
    # u = 0 is admissible, so v <= x^2 / 2; v is nonnegative
    p, vg = example_grid
    assert np.all(vg.v <= 0.5 * vg.x[None, :] ** 2 + 1e-12)
    assert np.all(vg.v >= -1e-12)


def test_penalized_solver_agrees(example_grid):
    p = model.make_quadratic_example(n_steps=40)
    grid = hjb.SpatialGrid(-2.0, 2.0, 41)
    a = hjb.solve_hjb_vi(p, grid)
    b = hjb.solve_hjb_penalized(p, grid)
    assert np.abs(a.v - b.v).max() <= 1e-3


def test_penalized_obstacle_close():
    p = scalar_problem(model.affine(c_phi=[-2.0], G=[[1.0]], K=[1.0]), n_steps=20)
    grid = hjb.SpatialGrid(0.0, 1.0, 11)
    a = hjb.solve_hjb_vi(p, grid)
    b = hjb.solve_hjb_penalized(p, grid, penalty=1e6)
    assert np.abs(a.v - b.v).max() <= 1e-4


def test_monotone_in_singular_cost():
    p = scalar_problem(model.affine(c_phi=[-2.0], s0=[0.3], G=[[1.0]], K=[1.0]), n_steps=20)
    assert hjb.k_monotonicity(p, hjb.SpatialGrid(-1.0, 1.0, 21), 2.0) >= 0.0
    with pytest.raises(ValueError):
        hjb.k_monotonicity(p, hjb.SpatialGrid(-1.0, 1.0, 21), 0.5)


def test_feedback_takes_largest_drift_when_cost_is_negative():
    # f = -u and b = u: both terms favour u = 1
    p = scalar_problem(model.affine(B=[[1.0]], fu=[-1.0], c_phi=[-1.0]), n_steps=20)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(-1.0, 3.0, 41))
    fb = hjb.extract_feedback(vg, p)
    np.testing.assert_array_equal(fb.control.table, 1.0)
    np.testing.assert_array_equal(vg.u_star, 1.0)


def test_convergence_error_carries_history():
    p = model.make_quadratic_example(n_steps=20)
    with pytest.raises(hjb.HJBConvergenceError) as err:
        hjb.solve_hjb_vi(p, hjb.SpatialGrid(-2.0, 2.0, 41), max_iter=1)
    assert len(err.value.history) == 1


def test_fd_mc_consistency_example(example_grid):
    p, vg = example_grid
    for x0 in (0.0, 0.5):
        res = hjb.fd_mc_consistency(vg, p, McConfig(2000, 0), x_start=x0)
        assert res["passed"], res


def test_fd_mc_consistency_running_cost():
    p = model.make_running_cost(n_steps=50)
    vg = hjb.solve_hjb_vi(p, hjb.SpatialGrid(-1.0, 1.0, 21))
    res = hjb.fd_mc_consistency(vg, p, McConfig(500, 0))
    assert abs(res["J"] - 1.0) <= 2 * p.grid.dt and res["passed"]


def test_dpp_mp_and_verification(example_grid):
    p, vg = example_grid
    mc = McConfig(1000, 0)
    fb = hjb.extract_feedback(vg, p)
    fwd = simulate.simulate_forward(p, fb.control, fb.push, mc)
    bwd = simulate.solve_bsde(p, fwd, mc)
    cls = adjoint.solve_classical_adjoints(p, fwd, bwd, mc)
    link = hjb.check_dpp_mp_connection(vg, fwd, cls, p)
    assert link.passed and link.margin == 1.0
    assert link.gradient_deviation <= 2e-2
    ver = hjb.verification_check(vg, fwd, p)
    assert ver.passed and ver.tail_integral <= ver.tol


def test_path_outside_grid_reported(example_grid):
    p, vg = example_grid
    fwd = simulate.simulate_forward(p, 1.0, None, McConfig(200, 0))
    bwd = simulate.solve_bsde(p, fwd, McConfig(200, 0))
    cls = adjoint.solve_classical_adjoints(p, fwd, bwd, McConfig(200, 0))
    narrow = hjb.ValueGrid.from_values(vg.times, vg.x[40:61], vg.v[:, 40:61], p)
    with pytest.raises(ValueError, match="widen the grid"):
        hjb.check_dpp_mp_connection(narrow, fwd, cls, p)


def _grid_from(fn, n_x=201, lo=-1.0, hi=1.0):
    x = np.linspace(lo, hi, n_x)
    t = np.linspace(0.0, 1.0, 3)
    return hjb.ValueGrid.from_values(t, x, np.tile(fn(x), (3, 1)))


def test_jets_of_smooth_function():
    vg = _grid_from(lambda x: 0.5 * x ** 2)
    probe = hjb.superjet_probe(vg, (0.0, 0.3), 0.05)
    assert probe.q == pytest.approx(0.3, abs=1e-8)
    assert probe.theta == pytest.approx(1.0, abs=1e-6)
    assert probe.superjet and probe.subjet


def test_jets_at_a_kink():
    vg = _grid_from(np.abs)
    probe = hjb.superjet_probe(vg, (0.0, 0.0), 0.05)
    assert probe.subjet and not probe.superjet
    assert hjb.superjet_probe(vg, (0.0, 0.0), 0.05, candidate_q=0.5).subjet
    assert not hjb.superjet_probe(vg, (0.0, 0.0), 0.05, candidate_q=1.5).subjet
    flip = hjb.superjet_probe(_grid_from(lambda x: -np.abs(x)), (0.0, 0.0), 0.05)
    assert flip.superjet and not flip.subjet


def test_semiconcavity():
    vg = _grid_from(lambda x: 0.5 * x ** 2)
    rep = hjb.semiconcavity_check(vg, 1.0)
    assert rep.passed and rep.value == pytest.approx(-1.0, abs=1e-8)
    assert not hjb.semiconcavity_check(vg, 0.25).passed


def test_value_grid_csv(tmp_path, example_grid):
    p, vg = example_grid
    path = tmp_path / "v.csv"
    hjb.write_value_grid_csv(vg, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x", "v", "mask", "u_star"]
    assert len(rows) == 1 + vg.v.size


def test_summary_roundtrip(tmp_path, example_grid):
    p, vg = example_grid
    s = hjb.hjb_summary(vg, p)
    hjb.save_summary(s, tmp_path / "s.json")
    assert (tmp_path / "s.json").read_text().count('"schema": 1') == 1
