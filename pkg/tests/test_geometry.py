import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splashmhd.errors import AmbiguousProjection, DegenerateCurve, Outside, TubularOverlap
from splashmhd.geometry import (BoundaryCurve, TubularFrame, arclength_normalize, circle,
                                displaced, frame_at, hausdorff_distance, max_curvature,
                                min_arc_distance, point_segment_distance, read_curve,
                                segment_segment_distance, self_intersects, signed_area,
                                tubular_coords, write_curve)


@pytest.fixture(scope="module")
def unit_circle():
    return arclength_normalize(circle(256, 1.0), 256)


def test_signed_area_of_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert signed_area(sq) == 1.0
    assert signed_area(sq[::-1]) == -1.0


def test_clockwise_input_is_reversed():
    c = BoundaryCurve(circle(64).nodes[::-1])
    assert c.orientation


def test_closing_node_dropped():
    pts = circle(32).nodes
    c = BoundaryCurve(np.vstack([pts, pts[:1]]))
    assert len(c.nodes) == 32


def test_normalized_circle_length_and_speed(unit_circle):
    assert unit_circle.length == pytest.approx(2 * np.pi, rel=1e-8)
    r = np.linspace(0, unit_circle.length, 1000, endpoint=False)
    speed = np.linalg.norm(unit_circle.evaluate(r, 1), axis=1)
    assert np.max(np.abs(speed - 1)) < 1e-6


def test_frame_on_circle_points_outward_with_unit_curvature(unit_circle):
    r = np.linspace(0, unit_circle.length, 50, endpoint=False)
    t, n, k = frame_at(unit_circle, r)
    p = unit_circle.evaluate(r)
    assert np.allclose(n, p / np.linalg.norm(p, axis=1)[:, None], atol=1e-6)
    assert np.allclose(np.sum(t * n, axis=1), 0, atol=1e-14)
    # cubic interpolant: curvature error of order h^2 / 12 with h = 2 pi / 256
    assert np.allclose(k, 1.0, atol=1e-4)
    assert max_curvature(unit_circle) == pytest.approx(1.0, abs=1e-4)


def test_too_few_nodes_is_degenerate():
    with pytest.raises(DegenerateCurve):
        arclength_normalize(circle(6))


def test_zero_length_is_degenerate():
    with pytest.raises(DegenerateCurve):
        arclength_normalize(BoundaryCurve(np.zeros((10, 2)) + 1e-15 * np.arange(20).reshape(10, 2)))


def test_evaluate_requires_normalization():
    with pytest.raises(DegenerateCurve):
        circle(16).evaluate(0.0)


def test_tubular_coords_sign_convention(unit_circle):
    r, lam = tubular_coords(unit_circle, [1.1, 0.0])
    assert lam == pytest.approx(0.1, abs=1e-8)
    r2, lam2 = tubular_coords(unit_circle, [0.0, -0.8])
    assert lam2 == pytest.approx(-0.2, abs=1e-8)
    # r is arc length from node 0 at angle 0, counterclockwise
    assert r2 == pytest.approx(1.5 * np.pi, abs=1e-6)


def test_tubular_coords_center_is_ambiguous(unit_circle):
    with pytest.raises(AmbiguousProjection):
        tubular_coords(unit_circle, [0.0, 0.0])


def test_tubular_coords_beyond_half_width(unit_circle):
    with pytest.raises(Outside):
        tubular_coords(unit_circle, [1.5, 0.0], lambda_max=0.3)


def test_tubular_frame_rejects_overlap(unit_circle):
    with pytest.raises(TubularOverlap):
        TubularFrame(unit_circle, 1.0)
    f = TubularFrame(unit_circle, 0.5)
    p = f.point(np.array([0.0]), np.array([0.25]))
    assert np.allclose(p, [[1.25, 0.0]], atol=1e-8)
    # the r-derivative scales by 1 + lam kappa
    assert np.linalg.norm(f.T(np.array([0.0]), np.array([0.25]))) == pytest.approx(1.25, abs=1e-4)


def test_figure_eight_self_intersects():
    th = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    pts = np.stack([np.sin(th), np.sin(th) * np.cos(th)], -1)
    hits = self_intersects(BoundaryCurve(pts, enforce_ccw=False), 1e-6)
    assert len(hits) == 1
    assert np.allclose(hits[0][2], [0, 0], atol=1e-6)


def test_circle_is_simple(unit_circle):
    assert self_intersects(unit_circle, 1e-3) == []


def test_min_arc_distance_of_thin_slot():
    # sampled rectangle 4 x 0.2: opposite long sides are 0.2 apart
    xs = np.linspace(0, 4, 201)[:-1]
    ys = np.linspace(0, 0.2, 11)[:-1]
    pts = np.concatenate([
        np.stack([xs, 0 * xs], -1), np.stack([4 + 0 * ys, ys], -1),
        np.stack([4 - xs, 0.2 + 0 * xs], -1), np.stack([0 * ys, 0.2 - ys], -1)])
    d, ra, rb = min_arc_distance(BoundaryCurve(pts), window_length=1.0)
    assert d == pytest.approx(0.2, abs=1e-12)
    assert abs(ra - rb) >= 1.0


def test_min_arc_distance_window_validation(unit_circle):
    with pytest.raises(ValueError):
        min_arc_distance(unit_circle, window=1)


def test_min_arc_distance_of_circle_is_chord(unit_circle):
    # window of a quarter circle: the closest admissible pair is a quarter apart
    d, *_ = min_arc_distance(unit_circle, window_length=0.5 * np.pi)
    assert d == pytest.approx(np.sqrt(2), abs=1e-3)


def test_hausdorff_of_concentric_circles():
    a = circle(2000, 1.0)
    b = circle(2000, 1.1)
    assert hausdorff_distance(a, b) == pytest.approx(0.1, abs=1e-5)
    assert hausdorff_distance(a, a) == 0.0


def test_displaced_keeps_normalization(unit_circle):
    d = displaced(unit_circle, [0.5, -0.25])
    assert d.is_normalized
    assert d.length == pytest.approx(unit_circle.length, rel=1e-9)
    assert np.allclose(d.nodes, unit_circle.nodes + [0.5, -0.25])


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_curve_file_round_trip(tmp_path, suffix):
    c = circle(40, 0.7, (0.1, 0.2))
    p = tmp_path / f"c{suffix}"
    write_curve(c, p)
    assert np.array_equal(read_curve(p).nodes, c.nodes)


# --- properties ----------------------------------------------------------------

coords = st.floats(-5, 5)
pt = st.tuples(coords, coords).map(np.array)


@settings(max_examples=200, deadline=None)
@given(pt, pt, pt)
def test_point_segment_distance_bounded_by_endpoints(p, a, b):
    d, t = point_segment_distance(p, a, b)
    assert 0 <= t <= 1
    assert d <= min(np.linalg.norm(p - a), np.linalg.norm(p - b)) + 1e-12


@settings(max_examples=200, deadline=None)
@given(pt, pt, pt, pt)
def test_segment_distance_symmetric(a0, a1, b0, b1):
    d1, s, t = segment_segment_distance(a0, a1, b0, b1)
    d2, _, _ = segment_segment_distance(b0, b1, a0, a1)
    assert abs(d1 - d2) < 1e-9
    # the reported parameters realize the distance
    pa = a0 + s * (a1 - a0)
    pb = b0 + t * (b1 - b0)
    assert abs(np.linalg.norm(pa - pb) - d1) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-3, 3), st.floats(-3, 3))
def test_circle_length_and_curvature_under_similarity(radius, cx, cy):
    c = arclength_normalize(circle(128, radius, (cx, cy)))
    assert c.length == pytest.approx(2 * np.pi * radius, rel=1e-7)
    assert max_curvature(c) == pytest.approx(1 / radius, rel=5e-4)
    assert self_intersects(c, 1e-3 * radius) == []
