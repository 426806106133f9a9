import numpy as np
import pytest

from splashmhd.conformal import ConformalMap
from splashmhd.errors import DataTraceViolation, ValidationError
from splashmhd.geometry import arclength_normalize, circle
from splashmhd.mesh_fields import build_mesh
from splashmhd.stokes_solver import (LinearStokesData, apply_operator, assemble_operator,
                                     data_norms, kinetic_energy, l2h1_error,
                                     manufactured_problem, pressure_nullspace_dimension,
                                     round_trip_error, solve_slab, traction)

CMAP = ConformalMap(0j)


@pytest.fixture(scope="module")
def disk_curve():
    # off the cut: the disk sits in the right half of the reference plane
    return arclength_normalize(circle(64, 0.5, (1.5, 0.5)))


@pytest.fixture(scope="module")
def mesh(disk_curve):
    return build_mesh(disk_curve, 0.2)


@pytest.fixture(scope="module")
def system(mesh):
    return assemble_operator(mesh, CMAP, 0.025)


def test_data_shape_validation(mesh):
    d = LinearStokesData.zeros(mesh, 0.1, 4)
    assert d.n_steps == 4 and d.dt == pytest.approx(0.025)
    with pytest.raises(ValidationError):
        LinearStokesData(mesh, 0.1, d.f[:, :1], d.g, d.h)
    with pytest.raises(ValidationError):
        LinearStokesData(mesh, 0.0, d.f, d.g, d.h)
    with pytest.raises(ValidationError):
        d + LinearStokesData.zeros(mesh, 0.1, 5)


def test_nonzero_initial_traces_rejected(system, mesh):
    d = LinearStokesData.from_callables(mesh, 0.1, 4, f=lambda t, x: np.ones(x.shape))
    with pytest.raises(DataTraceViolation):
        solve_slab(system, d)
    cleaned = d.remove_initial_traces()
    cleaned.check_traces()
    assert np.all(cleaned.f == 0)


def test_linear_divergence_data_trace_removed(mesh):
    # g = t c: vanishes at 0 but its time derivative does not
    d = LinearStokesData.from_callables(mesh, 0.1, 4, g=lambda t, x: t * np.ones(x.shape[:-1]))
    with pytest.raises(DataTraceViolation):
        d.check_traces()
    d.remove_initial_traces().check_traces()


def test_step_must_match_operator(system, mesh):
    with pytest.raises(ValidationError):
        solve_slab(system, LinearStokesData.zeros(mesh, 0.1, 5))
    with pytest.raises(ValidationError):
        assemble_operator(mesh, CMAP, 0.0)


def test_traction_condition_leaves_no_pressure_kernel(system):
    assert pressure_nullspace_dimension(system) == 0


def test_zero_data_gives_zero_solution(system, mesh):
    sol = solve_slab(system, LinearStokesData.zeros(mesh, 0.1, 4))
    assert np.all(sol.w == 0) and np.all(sol.q == 0)


def test_linear_in_time_solution_has_only_spatial_error(disk_curve):
    # implicit Euler is exact for w = t U, so refining h alone drives the error
    errs = []
    for h in (0.2, 0.1):
        m = build_mesh(disk_curve, h)
        d, (we, gwe, _) = manufactured_problem(m, CMAP, 0.1, 4, power=1)
        sol = solve_slab(assemble_operator(m, CMAP, d.dt), d, check_traces=False)
        errs.append(l2h1_error(sol, we, gwe))
    assert np.log2(errs[0] / errs[1]) >= 1.5
    assert errs[1] < 2e-5


def test_solution_satisfies_steps_to_solver_tolerance(system, mesh):
    d, _ = manufactured_problem(mesh, CMAP, 0.1, 4)
    sol = solve_slab(system, d)
    assert np.max(sol.residuals) < 1e-10


def test_forward_operator_round_trip(system, mesh):
    d, _ = manufactured_problem(mesh, CMAP, 0.1, 4)
    sol = solve_slab(system, d)
    back = apply_operator(sol, CMAP, system)
    assert round_trip_error(d, back) < 0.05
    # the divergence constraint is exact in the weak sense; pointwise it is of order h^2
    n = data_norms(d)
    assert data_norms(d - back)["g"] < 0.05 * n["g"]


def test_traction_of_rest_state_is_pressure_normal(mesh):
    w = np.zeros((mesh.n_nodes, 2))
    q = np.full(mesh.n_vertices, 2.0)
    h = traction(mesh, CMAP, w, q)
    # with w = 0 the traction is -q J^{-1} n0
    from splashmhd.conformal import jacobian_inverse_at
    ep, _, en, _, _ = mesh.edge_quad
    expect = -2.0 * np.einsum("eqij,ej->eqi", jacobian_inverse_at(CMAP, ep), en)
    assert np.allclose(h, expect, atol=1e-12)


def test_kinetic_energy_weights_by_conformal_factor(system, mesh):
    # M carries the 1/Q2 weight: energy of a unit field is half the weighted area
    w = np.zeros((mesh.n_nodes, 2))
    w[:, 0] = 1.0
    from splashmhd.conformal import q_squared_at
    area = float(np.sum(mesh.quad_weights / q_squared_at(CMAP, mesh.quad_points)))
    assert kinetic_energy(system, w) == pytest.approx(0.5 * area, rel=1e-12)
