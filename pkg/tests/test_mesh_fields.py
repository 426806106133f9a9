import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splashmhd.errors import EigenbasisUnavailable, MeshingFailed, TooFewSamples, ValidationError
from splashmhd.geometry import BoundaryCurve, arclength_normalize, circle
from splashmhd.mesh_fields import (BealeNormConfig, DiscreteField, Trajectory, beale_time_norm,
                                   beale_time_norm_h0, build_mesh, composite_norm,
                                   compute_eigenbasis, grad, l2_norm, load_field, load_mesh,
                                   load_trajectory, save_field, save_mesh, save_trajectory,
                                   sobolev_norm)


def _square(n=10):
    s = np.arange(n) / n
    pts = np.concatenate([np.stack([s, 0 * s], -1), np.stack([1 + 0 * s, s], -1),
                          np.stack([1 - s, 1 + 0 * s], -1), np.stack([0 * s, 1 - s], -1)])
    return BoundaryCurve(pts)


@pytest.fixture(scope="module")
def square():
    return build_mesh(_square(), 0.1)


@pytest.fixture(scope="module")
def disk():
    return build_mesh(arclength_normalize(circle(128)), 0.2)


def test_square_mesh_quality_and_area(square):
    assert square.min_angle() >= 20.0
    assert square.area == pytest.approx(1.0, abs=1e-14)
    assert square.h < 0.2


def test_disk_boundary_vertices_on_circle(disk):
    b = disk.vertices[disk.boundary_loop]
    assert np.allclose(np.linalg.norm(b, axis=1), 1.0, atol=1e-6)
    # the boundary loop runs counterclockwise
    ang = np.unwrap(np.arctan2(b[:, 1], b[:, 0]))
    assert ang[-1] > ang[0]


def test_nonpositive_h_rejected():
    with pytest.raises(MeshingFailed):
        build_mesh(_square(), 0.0)


def test_self_intersecting_boundary_rejected():
    th = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    pts = np.stack([np.sin(th), np.sin(th) * np.cos(th)], -1)
    with pytest.raises(MeshingFailed):
        build_mesh(BoundaryCurve(pts, enforce_ccw=False), 0.1)


def test_mass_matrix_integrates_quadratics_exactly(square):
    M = square.mass_matrix()
    one = np.ones(square.n_nodes)
    x = square.nodes[:, 0]
    assert one @ M @ one == pytest.approx(1.0, abs=1e-13)
    assert x @ M @ x == pytest.approx(1.0 / 3.0, abs=1e-13)


def test_stiffness_matrix_annihilates_constants_and_integrates_gradients(square):
    K = square.stiffness_matrix()
    assert np.max(np.abs(K @ np.ones(square.n_nodes))) < 1e-12
    x2 = square.nodes[:, 0] ** 2
    # int |grad x^2|^2 = int 4 x^2 = 4/3
    assert x2 @ K @ x2 == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_recovered_gradient_exact_on_quadratics(square):
    x, y = square.nodes.T
    g = square.recovered_gradient(x ** 2 + x * y)
    assert np.allclose(g, np.stack([2 * x + y, x], -1), atol=1e-10)


def test_tensor_gradient_layout(square):
    x, y = square.nodes.T
    u = DiscreteField.from_nodal(square, "P2-vector", np.stack([x * y, x ** 2], -1))
    G = grad(u).nodal()
    assert G.shape == (square.n_nodes, 2, 2)
    # [i, j] = d_j u^i
    assert np.allclose(G[:, 0, 0], y, atol=1e-10)
    assert np.allclose(G[:, 0, 1], x, atol=1e-10)
    assert np.allclose(G[:, 1, 0], 2 * x, atol=1e-10)
    assert np.allclose(G[:, 1, 1], 0, atol=1e-10)


def test_field_validation(square):
    with pytest.raises(ValidationError):
        DiscreteField(square, "P2-vector", np.zeros(3))
    with pytest.raises(ValidationError):
        DiscreteField(square, "P3-scalar", np.zeros(square.n_nodes))


def test_field_arithmetic(square):
    a = DiscreteField(square, "P2-scalar", np.ones(square.n_nodes))
    b = 2 * a - a * 0.5
    assert np.allclose(b.dofs, 1.5)


def test_spectral_norm_requires_eigenbasis():
    m = build_mesh(_square(8), 0.2)
    f = DiscreteField(m, "P2-scalar", np.ones(m.n_nodes))
    with pytest.raises(EigenbasisUnavailable):
        sobolev_norm(f, 1.0)


def test_neumann_eigenvalues_of_unit_square(square):
    eb = compute_eigenbasis(square, 6)
    assert eb.eigenvalues[0] == 0.0
    # pi^2 (m^2 + n^2): pi^2 twice, then 2 pi^2
    assert np.allclose(eb.eigenvalues[1:4], np.pi ** 2 * np.array([1, 1, 2]), rtol=1e-3)


def test_sobolev_norm_of_eigenfunction(square):
    compute_eigenbasis(square, 20)
    f = square.interpolate(lambda x, y: np.cos(np.pi * x))
    l2 = l2_norm(f)
    assert sobolev_norm(f, 0.0) == pytest.approx(l2, rel=1e-12)
    for s in (0.5, 1.5, 2.25):
        assert sobolev_norm(f, s) == pytest.approx((1 + np.pi ** 2) ** (s / 2) * l2, rel=2e-3)


def test_sobolev_index_range(square):
    compute_eigenbasis(square, 20)
    f = DiscreteField(square, "P2-scalar", np.ones(square.n_nodes))
    with pytest.raises(ValidationError):
        sobolev_norm(f, 5.0)


# --- time norms ----------------------------------------------------------------

@pytest.mark.parametrize("n", [0, 1, 2])
@pytest.mark.parametrize("s", [0.5, 1.5, 2.25])
def test_sine_eigenfunction_norm(n, s):
    T = 0.05
    t = np.linspace(0, T, 129)
    v = np.sqrt(2 / T) * np.sin((2 * n + 1) * np.pi * t / (2 * T))
    expect = ((2 * n + 1) * np.pi / (2 * T)) ** s
    assert beale_time_norm_h0(v, s, T, 32) == pytest.approx(expect, rel=1e-10)


@pytest.mark.parametrize("n", [0, 1, 2])
@pytest.mark.parametrize("s", [0.5, 1.5, 2.25])
def test_cosine_eigenfunction_norm(n, s):
    T = 0.05
    t = np.linspace(0, T, 129)
    u = np.sqrt(2 / T) * np.cos(n * np.pi * t / T) if n else np.full_like(t, 1 / np.sqrt(T))
    expect = (1 + n ** 2 * np.pi ** 2 / T ** 2) ** (s / 2)
    assert beale_time_norm(u, s, T, 32) == pytest.approx(expect, rel=1e-10)


def test_too_many_modes_rejected():
    with pytest.raises(TooFewSamples):
        beale_time_norm_h0(np.zeros(5), 1.0, 1.0, 8)
    with pytest.raises(TooFewSamples):
        beale_time_norm(np.zeros(1), 1.0, 1.0, 1)


def test_negative_order_rejected():
    with pytest.raises(ValidationError):
        beale_time_norm(np.zeros(9), -1.0, 1.0, 4)


@pytest.mark.parametrize("kw", [{"s": 3.0}, {"s": 2.0}, {"gamma": 1.3}, {"gamma": 1.0}, {"T": 0.0}])
def test_norm_config_validation(kw):
    with pytest.raises(ValidationError):
        BealeNormConfig(**kw)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=17, max_size=17), st.floats(-5, 5),
       st.floats(0.5, 2.5))
def test_time_norms_are_absolutely_homogeneous(vals, c, s):
    v = np.array(vals)
    for f in (beale_time_norm, beale_time_norm_h0):
        assert f(c * v, s, 0.5, 8) == pytest.approx(abs(c) * f(v, s, 0.5, 8), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=17, max_size=17), st.floats(0.0, 2.0))
def test_sine_norm_grows_with_order_on_short_slabs(vals, s):
    # every quarter-wave frequency exceeds 1 when T < pi / 2
    v = np.array(vals)
    assert beale_time_norm_h0(v, s + 0.25, 0.5, 8) >= beale_time_norm_h0(v, s, 0.5, 8) - 1e-12


# --- space-time norms and I/O -----------------------------------------------------

def test_composite_norm_of_zero_and_bad_tag(square):
    compute_eigenbasis(square, 20)
    cfg = BealeNormConfig(T=0.1, n_space_modes=20, n_time_modes=4)
    traj = Trajectory(square, "P2-vector", 0.1, np.zeros((5, 2 * square.n_nodes)))
    assert composite_norm(traj, "K", cfg) == 0.0
    traj.dofs[:] = 1.0
    with pytest.raises(ValidationError):
        composite_norm(traj, "Z", cfg)


def test_composite_K_norm_of_separable_trajectory(square):
    eb = compute_eigenbasis(square, 20)
    cfg = BealeNormConfig(T=0.1, n_space_modes=20, n_time_modes=8)
    T, N = 0.1, 32
    t = np.linspace(0, T, N + 1)
    a = np.sqrt(2 / T) * np.sin(np.pi * t / (2 * T))
    f = eb.vectors[:, 1]  # unit mass-norm eigenmode
    traj = Trajectory(square, "P2-scalar", T, a[:, None] * f[None, :])
    lam = eb.eigenvalues[1]
    mu = np.pi / (2 * T)
    # time integrals use the same trapezoid rule as the norm
    w = np.full(N + 1, T / N)
    w[[0, -1]] *= 0.5
    l2t = float(w @ a ** 2)
    expect = np.sqrt(l2t * (1 + lam) ** cfg.s + mu ** cfg.s)
    assert composite_norm(traj, "K", cfg) == pytest.approx(expect, rel=1e-9)


def test_mesh_field_trajectory_round_trip(tmp_path, square):
    save_mesh(square, tmp_path / "m.json")
    m2 = load_mesh(tmp_path / "m.json")
    assert np.array_equal(m2.nodes, square.nodes)
    f = square.interpolate(lambda x, y: (x, y * x), "P2-vector")
    save_field(f, tmp_path / "f", time=0.25)
    g, t = load_field(m2, tmp_path / "f")
    assert t == 0.25 and np.array_equal(g.dofs, f.dofs)
    tr = Trajectory(square, "P2-vector", 0.3, np.stack([f.dofs, 2 * f.dofs]))
    save_trajectory(tr, tmp_path / "tr")
    tr2 = load_trajectory(m2, tmp_path / "tr")
    assert tr2.T == 0.3 and np.array_equal(tr2.dofs, tr.dofs)
