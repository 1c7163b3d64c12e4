import numpy as np
import pytest

from gooed.exceptions import ConfigError, DimensionMismatch
from gooed.transport import (
    OBSTACLES,
    PriorOperatorConfig,
    SensorLayout,
    TransportConfig,
    TransportModel,
    VelocityField,
    band_nodes,
    build_grid,
    build_problem,
    candidate_sensors,
    default_velocity,
    discrete_divergence,
    distance_to_rectangle,
    grid_for_dimension,
    lattice_sensors,
    write_velocity_file,
)

N = 20  # block edges fall on lattice lines


@pytest.fixture(scope="module")
def grid():
    return build_grid(N)


@pytest.fixture(scope="module")
def tm(grid):
    return TransportModel(grid)


def dense(fn, n):
    return fn(np.eye(n))


def test_grid_geometry(grid):
    assert np.array_equal(grid.index[grid.ij[:, 0], grid.ij[:, 1]], np.arange(grid.d_m))
    assert np.all(grid.index[~grid.active] == -1)
    x, y = grid.coords.T
    for x0, x1, y0, y1 in OBSTACLES:
        assert not np.any((x > x0 + 1e-12) & (x < x1 - 1e-12) & (y > y0 + 1e-12) & (y < y1 - 1e-12))
    blocks = sum((x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in OBSTACLES)
    assert abs(grid.areas.sum() - (1 - blocks)) <= 1e-12
    assert abs(grid.exterior_length.sum() - 4.0) <= 1e-12
    perimeter = sum(2 * (x1 - x0 + y1 - y0) for x0, x1, y0, y1 in OBSTACLES)
    assert abs(grid.obstacle_length.sum() - perimeter) <= 1e-12


def test_grid_limits():
    with pytest.raises(ConfigError):
        build_grid(15)
    g = grid_for_dimension(1993)
    assert g.n == 46 and g.d_m == 1993


def test_velocity_divergence_free_and_tangential(grid):
    fe, fn = default_velocity().face_fluxes(grid)
    assert np.max(np.abs(discrete_divergence(grid, fe, fn))) <= 1e-14
    v = default_velocity().evaluate([(0.02, 0.5), (0.98, 0.5), (0.5, 0.02)])
    assert v[0, 1] > 0.5 and v[1, 1] < -0.5 and v[2, 0] < -0.5
    wall = default_velocity().evaluate([(0.5, 1.0), (0.0, 0.3), (0.25, 0.3), (0.7, 0.6)])
    assert np.max(np.abs(wall[:, [1, 0, 0, 1]].diagonal())) <= 1e-8


def test_step_and_adjoint_dot(tm, grid):
    rng = np.random.default_rng(0)
    u, w = rng.standard_normal(grid.d_m), rng.standard_normal(grid.d_m)
    lhs = w @ tm.solve_forward(u, 0.2)
    rhs = tm.solve_adjoint(w, 0.2) @ u
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


@pytest.mark.parametrize("advection,times", [("centered", None), ("upwind", None), ("centered", (0.4, 0.8))])
def test_forward_operator_dot(grid, advection, times):
    tm = TransportModel(grid, TransportConfig(advection=advection, observation_times=times))
    layout = candidate_sensors("nine", grid)
    F = tm.forward_operator(layout)
    assert F.range_dim == 9 * (len(times) if times else 1)
    rng = np.random.default_rng(1)
    m, y = rng.standard_normal(grid.d_m), rng.standard_normal(F.range_dim)
    lhs, rhs = y @ F.apply(m), F.apply_adjoint(y) @ m
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-3)
    M = rng.standard_normal((grid.d_m, 3))
    assert np.allclose(F.apply(M), np.column_stack([F.apply(c) for c in M.T]), atol=1e-13)


def test_goal_operator_dot_and_constants(tm, grid):
    P = tm.goal_operator("both")
    rng = np.random.default_rng(2)
    m = rng.standard_normal(grid.d_m)
    lhs = 1.7 * P.apply(m)[0]
    rhs = P.apply_adjoint(np.array([1.7])) @ m
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
    for which in ("left", "right", "both"):
        assert abs(tm.goal_operator(which).apply(np.full(grid.d_m, 0.3))[0] - 0.3) <= 1e-8


def test_constants_preserved_and_linear(tm, grid):
    assert np.max(np.abs(tm.solve_forward(np.ones(grid.d_m), 0.8) - 1.0)) <= 1e-8
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(grid.d_m), rng.standard_normal(grid.d_m)
    lhs = tm.solve_forward(2 * a - 3 * b, 0.4)
    rhs = 2 * tm.solve_forward(a, 0.4) - 3 * tm.solve_forward(b, 0.4)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_time_must_be_whole_steps(tm):
    assert tm.steps_to(0.8) == 40 and tm.steps_to(1.0) == 50
    with pytest.raises(ConfigError):
        tm.steps_to(0.81)
    with pytest.raises(ConfigError):
        TransportConfig(advection="spectral")


def test_prior_operators(tm, grid):
    n = grid.d_m
    C = dense(tm.prior_cov_apply, n)
    L = dense(tm.prior_factor_apply, n)
    Lt = dense(tm.prior_factor_adjoint, n)
    Q = dense(tm.prior_precision_apply, n)
    scale = np.max(np.abs(C))
    assert np.max(np.abs(C - C.T)) <= 1e-12 * scale
    assert np.linalg.eigvalsh(C)[0] > 0
    assert np.max(np.abs(L @ L.T - C)) <= 1e-12 * scale
    assert np.max(np.abs(Lt - L.T)) <= 1e-12 * np.max(np.abs(L))
    assert np.max(np.abs(Q @ C - np.eye(n))) <= 1e-8
    var = np.diag(C)
    assert 0.002 < np.median(var) < 0.05


def test_prior_parameters_validated():
    with pytest.raises(ConfigError):
        PriorOperatorConfig(gamma=0)
    assert PriorOperatorConfig(gamma=1, delta=4).beta == 2.0
    assert PriorOperatorConfig(robin_beta=0.0).beta == 0.0


def test_band_union(grid):
    left, right, both = (set(band_nodes(grid, w)) for w in ("left", "right", "both"))
    assert left and right and not left & right
    assert both == left | right
    for nodes, rect in ((left, OBSTACLES[0]), (right, OBSTACLES[1])):
        pts = grid.coords[sorted(nodes)]
        assert np.all(distance_to_rectangle(pts, rect) <= 0.02 + grid.h)
    with pytest.raises(ConfigError):
        band_nodes(grid, "middle")


def test_sensor_layouts(grid):
    nine = candidate_sensors("nine", grid)
    assert nine.d == 9
    assert np.allclose(np.asarray(nine.weights.sum(axis=1)).ravel(), 1.0)
    assert np.all(nine.nodes < grid.d_m)
    pts, meta = lattice_sensors(75)
    assert len(pts) == 75 and len(np.unique(pts, axis=0)) == 75
    for rect in OBSTACLES:
        assert np.all(distance_to_rectangle(pts, rect) > 0.02)
    seventy = candidate_sensors("seventyfive", grid)
    assert seventy.d == 75
    with pytest.raises(ConfigError):
        SensorLayout.on_grid([(0.3, 0.3)], grid)
    with pytest.raises(ConfigError):
        SensorLayout.on_grid([(1.2, 0.3)], grid)


def test_bilinear_reads_linear_fields_exactly(grid):
    layout = candidate_sensors("seventyfive", grid)
    f = 0.3 + 2 * grid.coords[:, 0] - grid.coords[:, 1]
    expect = 0.3 + 2 * layout.coordinates[:, 0] - layout.coordinates[:, 1]
    exact = np.array(layout.weights.getnnz(axis=1)) > 1
    assert np.allclose((layout.weights @ f)[exact], expect[exact], atol=1e-13)


def test_sensor_csv_roundtrip(tmp_path, grid):
    layout = candidate_sensors("seventyfive", grid)
    layout.to_csv(tmp_path / "s.csv")
    back = SensorLayout.read_csv(tmp_path / "s.csv")
    assert np.array_equal(back, layout.coordinates)
    (tmp_path / "bad.csv").write_text("i,x\n0,1\n")
    with pytest.raises(DimensionMismatch):
        SensorLayout.read_csv(tmp_path / "bad.csv")


def test_velocity_file_roundtrip(tmp_path, grid):
    field = default_velocity()
    write_velocity_file(tmp_path / "v.txt", field, 41, 31)
    loaded = VelocityField.from_file(tmp_path / "v.txt")
    pts = np.array([(0.1, 0.2), (0.55, 0.9), (0.95, 0.5)])
    pts = np.round(pts * [40, 30]) / [40, 30]  # file lattice points
    assert np.allclose(loaded.evaluate(pts), field.evaluate(pts), rtol=0, atol=1e-9)
    tm = TransportModel(grid, TransportConfig(velocity=loaded))
    m = np.random.default_rng(0).standard_normal(grid.d_m)
    w = np.random.default_rng(1).standard_normal(grid.d_m)
    assert abs(w @ tm.solve_forward(m, 0.1) - tm.solve_adjoint(w, 0.1) @ m) <= 1e-11
    (tmp_path / "short.txt").write_text("2 2\n0 0\n")
    with pytest.raises(DimensionMismatch):
        VelocityField.from_file(tmp_path / "short.txt")


def test_build_problem_shapes():
    prob = build_problem(n=N, sensors="nine", goal="right")
    assert prob.model.d == 9 and prob.model.d_m == prob.grid.d_m
    assert prob.goal.d_rho == 1
    assert np.allclose(prob.model.noise.variances, 1e-4)
