import csv

import numpy as np
import pytest

from shapefilter import fixtures
from shapefilter.explicit import KernelSpec
from shapefilter.fem import DEFAULT_ELASTICITY, bulk_mass_matrix
from shapefilter.optimizer import (
    BulkSurfaceMapping,
    ConstraintConfig,
    FilterSelection,
    OptimizationConfig,
    OptimizationState,
    element_size,
    helmholtz_radius_for_mesh,
    project_constraint,
    relative_reduction,
    run_optimization,
    sequential_mesh_motion,
    steepest_descent_step,
    write_history_csv,
)
from shapefilter.responses import LoadCase, ResponseValue


@pytest.fixture(scope="module")
def bulk_sel(block4):
    return FilterSelection("bulk_surface", r_gamma=helmholtz_radius_for_mesh(block4, 5 * element_size(block4)))


def _state(vm):
    x = vm.nodes.ravel().copy()
    return OptimizationState(0, None, x)


def test_element_size(block4):
    assert element_size(block4) == pytest.approx(0.25)


def test_zero_step_leaves_state(block4, bulk_sel):
    m = BulkSurfaceMapping(block4, bulk_sel, DEFAULT_ELASTICITY)
    st = steepest_descent_step(_state(block4), m, np.ones(3 * block4.n_nodes), 0.0)
    assert np.array_equal(st.x, block4.nodes.ravel())


def test_uniform_sensitivity_translates(block4):
    # no fixed nodes: the whole mesh moves rigidly
    vm = type(block4)(block4.nodes, block4.tets)
    m = BulkSurfaceMapping(vm, FilterSelection(r_gamma=0.3), DEFAULT_ELASTICITY)
    d = np.array([0.0, 0.0, 1.0])
    g = (bulk_mass_matrix(vm) @ np.tile(d, (vm.n_nodes, 1))).ravel()
    alpha = 0.05
    st = steepest_descent_step(_state(vm), m, g, alpha)
    dx = (st.x - vm.nodes.ravel()).reshape(-1, 3)
    assert np.abs(dx - dx.mean(axis=0)).max() < 1e-8 * alpha
    assert np.allclose(dx.mean(axis=0), -alpha * d, atol=1e-9)


def test_two_steps_equal_one_double_step(block4, bulk_sel):
    m = BulkSurfaceMapping(block4, bulk_sel, DEFAULT_ELASTICITY)
    g = np.random.default_rng(0).standard_normal(3 * block4.n_nodes)
    a = steepest_descent_step(steepest_descent_step(_state(block4), m, g, 0.1), m, g, 0.1)
    b = steepest_descent_step(_state(block4), m, g, 0.2)
    assert np.allclose(a.x, b.x, atol=1e-12)
    assert np.allclose(a.s, b.s, atol=1e-15)


def test_projection_cases():
    rng = np.random.default_rng(0)
    c = rng.standard_normal(30)
    assert np.allclose(project_constraint(3.0 * c, c, 0.0), 0.0, atol=1e-14)
    M = np.diag(rng.uniform(0.5, 2.0, 10))
    g = rng.standard_normal(30)
    C, G = c.reshape(-1, 3), g.reshape(-1, 3)
    G = G - np.einsum("ij,ij->", G, M @ C) / np.einsum("ij,ij->", C, M @ C) * C
    assert np.allclose(project_constraint(G.ravel(), c, 0.0, M), -G.ravel(), atol=1e-14)
    d = project_constraint(g, c, 0.0, M).reshape(-1, 3)
    assert abs(np.einsum("ij,ij->", d, M @ C)) <= 1e-12 * np.linalg.norm(d) * np.linalg.norm(C)
    # violation correction moves against the constraint gradient
    d = project_constraint(g, c, 0.5, M).reshape(-1, 3)
    assert np.einsum("ij,ij->", d, M @ C) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        project_constraint(g, np.zeros(30), 0.0)


def test_mesh_motion_basic(ball3):
    bn = ball3.boundary_nodes
    assert not np.any(sequential_mesh_motion(ball3, np.zeros((len(bn), 3))))
    t = np.array([0.1, -0.2, 0.3])
    U = sequential_mesh_motion(ball3, np.tile(t, (len(bn), 1)))
    assert np.allclose(U, t, atol=1e-9)


def test_mesh_motion_radial_compression(ball3):
    bn = ball3.boundary_nodes
    jmins = []
    for amp in (0.0, 0.1, 0.2, 0.3):
        U = sequential_mesh_motion(ball3, -amp * ball3.nodes[bn])
        moved = ball3.with_nodes(ball3.nodes + U)
        jmins.append(moved.jacobians.min())
        interior = np.setdiff1d(np.arange(ball3.n_nodes), bn)
        if amp:
            r0 = np.linalg.norm(ball3.nodes[interior], axis=1)
            r1 = np.linalg.norm(moved.nodes[interior], axis=1)
            assert np.all(r1 <= r0 + 1e-12)
    assert np.all(np.diff(jmins) < 0)


def test_zero_sensitivities_stagnate(block4, bulk_sel):
    zero = lambda vm: ResponseValue(1.0, np.zeros(3 * vm.n_nodes))
    st = run_optimization(OptimizationConfig(objective=zero, alpha=1.0, max_iterations=50, filter=bulk_sel), block4)
    assert st.termination == "stagnation"
    assert np.array_equal(st.x, block4.nodes.ravel())


def test_max_iterations_zero(block4, bulk_sel):
    st = run_optimization(OptimizationConfig(max_iterations=0, filter=bulk_sel), block4)
    assert st.termination == "max_iterations" and len(st.history) == 1
    assert np.array_equal(st.x, block4.nodes.ravel())


def test_ball_volume_decreases_monotonically(ball3):
    sel = FilterSelection("bulk_surface", r_gamma=helmholtz_radius_for_mesh(ball3, 5 * element_size(ball3)))
    st = run_optimization(OptimizationConfig(max_iterations=15, filter=sel), ball3)
    f = st.objective_history
    assert np.all(np.diff(f) < 0)
    # first step moves 1% of the bounding-box diagonal
    diag = np.linalg.norm(np.ptp(ball3.nodes, axis=0))
    assert st.history[0].step_norm == pytest.approx(0.01 * diag, rel=1e-9)


def test_sequential_modes_run(block4):
    span = 5 * element_size(block4)
    for sel in (FilterSelection("explicit_sequential", kernel=KernelSpec.from_span("gaussian", span)),
                FilterSelection("implicit_surface_sequential", r_gamma=helmholtz_radius_for_mesh(block4, span))):
        st = run_optimization(OptimizationConfig(max_iterations=3, filter=sel), block4)
        assert st.objective_history[-1] < st.objective_history[0]
        # non-design nodes stay put
        moved = np.abs(st.x - block4.nodes.ravel()).reshape(-1, 3)
        assert np.all(moved[~block4.design_flags] == 0.0)


def test_constrained_run_keeps_violation_small(block4, bulk_sel, tmp_path):
    bottom = np.flatnonzero(~block4.design_flags)
    top = np.flatnonzero(block4.nodes[:, 2] > 1 - 1e-12)
    case = LoadCase(tuple(bottom.tolist()), {int(top[0]): (0.0, 0.0, -0.1)})
    v0 = 1.75
    cfg = OptimizationConfig(objective="strain_energy", load_case=case, max_iterations=6,
                             constraint=ConstraintConfig("volume", target=0.95 * v0, tolerance=1e-3),
                             filter=bulk_sel)
    st = run_optimization(cfg, block4)
    viol = np.abs(st.constraint_history - 0.95 * v0)
    assert viol[-1] < viol[0]
    path = write_history_csv(st, tmp_path / "h.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "objective", "constraint", "step_norm", "min_jacobian", "wall_time"]
    assert len(rows) == len(st.history) + 1


def test_distortion_stop_keeps_last_valid(block4, bulk_sel):
    st = run_optimization(OptimizationConfig(alpha=0.003, max_iterations=50,
                                             filter=FilterSelection("bulk_surface", r_gamma=0.05, beta=0.125)),
                          block4)
    assert st.termination == "distortion"
    assert block4.with_nodes(st.last_valid_x.reshape(-1, 3)).jacobians.min() > 0
    assert 0 < relative_reduction(st) < 1


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizationConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        FilterSelection("explicit_sequential")
    with pytest.raises(ValueError):
        FilterSelection("morphing")
    with pytest.raises(ValueError):
        ConstraintConfig("volume", 1.0, 0.0)
