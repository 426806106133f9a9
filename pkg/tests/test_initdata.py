import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splashmhd.conformal import ConformalMap, as_complex
from splashmhd.errors import CompatibilityFailed, TraceFailure, TubularOverlap, ValidationError
from splashmhd.geometry import arclength_normalize, circle, frame_at
from splashmhd.initdata import (FourierProfile, InitialData, PolynomialStream, StreamFunction,
                                StreamSpec, boundary_frame_rho, build_H0, build_psi2,
                                bump_flux_profile, check_compatibility, physical_boundary,
                                psi0_second, smooth_blend, stream_laplacian)
from splashmhd.mesh_fields import build_mesh

TWO_PI = 2 * np.pi


@pytest.fixture(scope="module")
def disk():
    return arclength_normalize(circle(256, 1.0), 256)


# --- profiles --------------------------------------------------------------------

def test_fourier_profile_derivatives_match_differences():
    f = FourierProfile(3.0, (0.2, 0.5, -0.1), (0.0, 0.3, 0.7), slope=0.4)
    r = np.linspace(0, 3, 17)
    h = 1e-5
    for der in (0, 1, 2):
        fd = (f(r + h, der) - f(r - h, der)) / (2 * h)
        assert np.allclose(fd, f(r, der + 1), atol=1e-6)


def test_fourier_interpolant_reproduces_samples():
    rng = np.random.default_rng(0)
    for n in (16, 17):
        v = rng.normal(size=n)
        f = FourierProfile.from_samples(v, 2.0)
        assert np.allclose(f(np.arange(n) * 2.0 / n), v, atol=1e-12)


def test_bump_profile_derivative_is_centered_gaussian_sum():
    L, width = 10.0, 0.5
    f = bump_flux_profile(L, [2.0, 7.0], width, 1.5, n_modes=128)
    rho = np.linspace(0, L, 400, endpoint=False)
    g = sum(np.exp(-0.5 * (((rho - c + L / 2) % L - L / 2) / width) ** 2) for c in (2.0, 7.0))
    mean = 2 * width * np.sqrt(TWO_PI) / L
    assert np.allclose(f(rho, 1), 1.5 * (g - mean), atol=1e-8)
    # periodic: psi0 itself returns to its start
    assert f(np.array([0.0])) == pytest.approx(f(np.array([L])), abs=1e-12)


def test_psi0_second_matches_second_derivative():
    f = FourierProfile(4.0, (1.0, 0.3, 0.2), (0.0, -0.5, 0.1))
    r = np.linspace(0, 4, 11)
    assert np.allclose(psi0_second(f)(r), f(r, 2), atol=1e-13)


def test_smooth_blend_end_values_and_symmetry():
    s, ds, d2s = smooth_blend(np.array([0.0, 0.5, 1.0]))
    assert np.allclose(s, [0, 0.5, 1], atol=1e-14)
    assert np.allclose(ds[[0, 2]], 0) and np.allclose(d2s[[0, 2]], 0)
    x = np.linspace(0, 1, 21)
    assert np.allclose(smooth_blend(x)[0] + smooth_blend(1 - x)[0], 1.0, atol=1e-13)


def test_smooth_blend_has_four_vanishing_derivatives_at_ends():
    # the polynomial part is x^5 (...) and (1 - x)^5 (...) about the ends
    for x0, sign in ((0.0, 1.0), (1.0, -1.0)):
        xs = x0 + sign * np.array([1e-2, 2e-2])
        s = smooth_blend(xs, upper=2.0)[0]
        dist = np.abs(s - smooth_blend(np.array([x0]), upper=2.0)[0])
        # fifth-order contact: halving the offset divides the gap by 2^5
        assert dist[1] / dist[0] == pytest.approx(32.0, rel=0.05)


def test_smooth_blend_derivatives_consistent():
    x = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    s, ds, d2s = smooth_blend(x)
    assert np.allclose((smooth_blend(x + h)[0] - smooth_blend(x - h)[0]) / (2 * h), ds, atol=1e-6)
    assert np.allclose((smooth_blend(x + h)[1] - smooth_blend(x - h)[1]) / (2 * h), d2s, atol=1e-5)


# --- magnetic stream ------------------------------------------------------------------

def test_polynomial_stream_field_is_divergence_free():
    h = PolynomialStream(((1, 0, 0.3), (1, 1, 0.2), (0, 3, -0.1)))
    rng = np.random.default_rng(1)
    p = rng.uniform(-2, 2, (30, 2))
    G = h.field_gradient(p)
    assert np.allclose(np.trace(G, axis1=1, axis2=2), 0, atol=1e-13)
    e = 1e-6
    for j in range(2):
        d = np.zeros(2)
        d[j] = e
        fd = (h.field(p + d) - h.field(p - d)) / (2 * e)
        assert np.allclose(fd, G[:, :, j], atol=1e-8)


def test_build_H0_from_quadratic_stream_is_exact():
    m = build_mesh(arclength_normalize(circle(64, 1.0)), 0.25)
    x, y = m.nodes.T
    from splashmhd.mesh_fields import DiscreteField
    H = build_H0(DiscreteField(m, "P2-scalar", x * y)).nodal()
    assert np.allclose(H, np.stack([-x, y], -1), atol=1e-10)
    with pytest.raises(ValidationError):
        build_H0(DiscreteField(m, "P2-vector", np.zeros(2 * m.n_nodes)))


# --- stream spec and function ----------------------------------------------------------

def _spec(L, **kw):
    psi0 = FourierProfile(L, (0.0, 0.5), (0.0, 0.3))
    return StreamSpec(psi0, kw.pop("lambda_max", 0.3), **kw)


def test_stream_spec_validation():
    L = TWO_PI
    with pytest.raises(ValidationError):
        _spec(L, lambda_max=0.0)
    with pytest.raises(ValidationError):
        _spec(L, psi1=FourierProfile(L, (0.0, 1.0)))
    with pytest.raises(ValidationError):
        _spec(L, blend="cubic")


def test_positive_flux_required_on_arcs():
    L = TWO_PI
    with pytest.raises(CompatibilityFailed):
        _spec(L).check_positive()
    # psi0' = -0.5 w sin(w rho) + 0.3 w cos(w rho) is positive near rho = 0
    _spec(L, positive_arcs=((-0.2, 0.2),)).check_positive()


def test_tubular_overlap_rejected(disk):
    spec = _spec(disk.length, lambda_max=1.0)
    with pytest.raises(TubularOverlap):
        StreamFunction(disk, spec.with_psi2(build_psi2(disk, spec.psi0, None)))


def test_missing_psi2_rejected(disk):
    with pytest.raises(ValidationError):
        StreamFunction(disk, _spec(disk.length))


def test_boundary_frame_runs_clockwise(disk):
    T, N, k = boundary_frame_rho(disk, np.array([0.0, np.pi / 2]))
    # rho = pi/2 is s = 3 pi / 2, the bottom of the circle; clockwise tangent points -x
    assert np.allclose(T[1], [-1.0, 0.0], atol=1e-6)
    assert np.allclose(N[1], [0.0, -1.0], atol=1e-6)
    assert np.allclose(k, -1.0, atol=1e-4)


@pytest.fixture(scope="module")
def mhd_stream(disk):
    H = PolynomialStream(((1, 1, 0.5),))
    spec = _spec(disk.length)
    spec = spec.with_psi2(build_psi2(disk, spec.psi0, H.field))
    return StreamFunction(disk, spec), H


def test_normal_velocity_equals_flux_profile(disk, mhd_stream):
    sf, _ = mhd_stream
    rho = np.linspace(0, disk.length, 40, endpoint=False)
    T, N, _ = boundary_frame_rho(disk, rho)
    s = np.mod(disk.length - rho, disk.length)
    pts = disk.evaluate(s)
    _, u = sf.evaluate(pts, s)
    assert np.allclose(np.sum(u * N, 1), sf.spec.psi0(rho, 1), atol=1e-10)


def test_stream_velocity_vanishes_deep_inside(mhd_stream):
    sf, _ = mhd_stream
    psi, u = sf.evaluate(np.array([[0.0, 0.1], [0.3, -0.2]]))
    assert np.all(u == 0.0)
    assert np.allclose(psi, sf.psi_c)


def test_stream_data_compatible_with_magnetic_stress(disk, mhd_stream):
    sf, H = mhd_stream
    data = InitialData(disk, lambda p, seeds=None: sf.evaluate(p, seeds)[1], H.field, stream=sf)
    rep = check_compatibility(data)
    assert rep.passed, rep
    assert rep.tangential_stress < 1e-6
    assert rep.divergence_u < 1e-6
    # zero net boundary flux of a divergence-free field
    assert abs(rep.flux) < 1e-8


def test_compatibility_check_flags_violations(disk):
    strain = InitialData.from_functions(disk, lambda p: np.stack([p[:, 0], -p[:, 1]], -1))
    assert strain.magnetic(np.zeros((1, 2))).shape == (1, 2)
    rep = check_compatibility(strain)
    assert rep.failures == ["tangential stress balance"]
    # u = x has divergence 1 and tangential stress 2 t.e1 n.e1 on the circle
    expand = InitialData.from_functions(disk, lambda p: np.stack([p[:, 0], 0 * p[:, 1]], -1))
    rep = check_compatibility(expand)
    assert "velocity divergence" in rep.failures
    assert rep.divergence_u == pytest.approx(1.0, abs=1e-8)


def test_untraceable_field_rejected(disk):
    with pytest.raises(TraceFailure):
        build_psi2(disk, _spec(disk.length).psi0, lambda p: np.zeros(3))


# --- maps to the physical plane ------------------------------------------------------------

def test_physical_boundary_length_is_integral_of_map_speed():
    tilde = arclength_normalize(circle(256, 0.5, (1.5, 0.5)))
    pb = physical_boundary(tilde, ConformalMap(0j), 512)
    # |d/dr w^2| = 2 |w| on a unit speed curve; for the circle |w - c| = R:
    th = np.linspace(0, TWO_PI, 20001)[:-1]
    w = 1.5 + 0.5j + 0.5 * np.exp(1j * th)
    expect = np.mean(2 * np.abs(w)) * TWO_PI * 0.5
    assert pb.curve.length == pytest.approx(expect, rel=1e-8)
    # the image nodes lie on the squared circle
    back = np.sqrt(as_complex(pb.curve.nodes))
    assert np.allclose(np.abs(back - (1.5 + 0.5j)), 0.5, atol=1e-6)
    r = np.array([0.3, 1.7])
    assert np.allclose(pb.r_of_s(pb.s_of_r(r)), r, atol=1e-9)


def test_preset_initial_data_compatible(wedge_base):
    rep = wedge_base.compatibility
    assert rep.passed, rep
    assert rep.psi2_residual < 1e-6
    assert rep.min_normal_velocity_arcs > 0


def test_stream_laplacian_converged_in_step(wedge_base):
    m = wedge_base.mesh
    a = stream_laplacian(wedge_base.init, m)
    b = stream_laplacian(wedge_base.init, m, step=wedge_base.init.stream.spec.lambda_max / 400)
    assert a.shape == m.quad_points.shape[:2] + (2,)
    w = m.quad_weights[..., None]
    rel = np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * a ** 2))
    assert rel < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95))
def test_stream_velocity_divergence_free_in_layer(disk, mhd_stream, depth):
    # fourth-order differences of the stream velocity inside the layer
    sf, _ = mhd_stream
    lm = sf.spec.lambda_max
    s = np.linspace(0, disk.length, 7, endpoint=False)
    _, n, _ = frame_at(disk, s)
    p = disk.evaluate(s) - depth * lm * n
    h = 2e-4
    div = np.zeros(len(p))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        f = [sf.evaluate(p + k * e, s)[1][:, j] for k in (-2, -1, 1, 2)]
        div += (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
    assert np.max(np.abs(div)) < 1e-6
