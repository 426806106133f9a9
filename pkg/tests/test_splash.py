import json

import numpy as np
import pytest

from splashmhd.conformal import ConformalMap, as_complex
from splashmhd.errors import GridMismatch, ValidationError
from splashmhd.geometry import arclength_normalize, circle, min_arc_distance
from splashmhd.mesh_fields import build_mesh
from splashmhd.picard import PicardConfig, reference_from_nodal
from splashmhd.splash_experiment import (ChainedRun, MemberResult, SplashReport, banana_points,
                                         default_delta, detect_splash_time, discrete_curvature,
                                         moved_mesh, run_chain, shifted_reference,
                                         splash_seed_curve, stability_table, touching_points)


# --- geometry of the seed ----------------------------------------------------------

def test_banana_outline_closes_at_uniform_spacing():
    z = banana_points(0.25, 4096)
    steps = np.abs(np.diff(np.r_[z, z[:1]]))
    assert np.ptp(steps) < 1e-3 * steps.mean()
    # outer arc radius 1 + a, inner 1 - a
    r = np.abs(z)
    assert r.max() == pytest.approx(1.25, abs=1e-9)
    assert r.min() == pytest.approx(0.75, abs=1e-9)
    with pytest.raises(ValidationError):
        banana_points(0.6)


def test_seed_touches_the_line_at_symmetric_points():
    curve, b, tips = splash_seed_curve()
    d = curve.nodes @ b
    assert d.min() >= -1e-6
    assert np.allclose(tips @ b, 0.0, atol=1e-6)
    # the images of the two tips coincide under w -> w^2
    w = as_complex(tips)
    assert abs(w[0] ** 2 - w[1] ** 2) < 1e-5 * abs(w[0]) ** 2
    # mirror symmetry about the axis b
    refl = 2 * (tips[0] @ b) * b - tips[0]
    assert np.allclose(refl, tips[1], atol=1e-5)


def test_touching_points_need_both_sides():
    c = arclength_normalize(circle(64, 0.5, (3.0, 0.0)))
    with pytest.raises(ValidationError):
        touching_points(c, [1.0, 1.0])


def test_preset_scenario_invariants(wedge):
    checks = wedge.check()
    assert checks["seed_contact"]
    assert checks["shifted_simple"] == list(wedge.epsilons)
    assert np.linalg.norm(wedge.b) == pytest.approx(1.0)
    assert len(wedge.tip_params) == 2 and len(wedge.arc_windows) == 2


def test_shift_opens_gap_proportional_to_eps(wedge):
    w_tip = abs(as_complex(wedge.base_tilde_domain.evaluate(wedge.tip_params[0])))
    for eps in (1e-2, 5e-3):
        c = wedge.image_polyline(eps)
        d, *_ = min_arc_distance(c, window_length=wedge.separation * c.length)
        assert d == pytest.approx(4 * w_tip * eps, rel=0.05)


@pytest.mark.parametrize("kw", [{"b": (0.0, 0.0)}, {"epsilons": (0.0,)}, {"t_bar": 0.0},
                                {"h_target": -1.0}, {"delta_splash": 0.0}, {"separation": 0.7}])
def test_scenario_validation(wedge, kw):
    from dataclasses import fields
    args = {f.name: getattr(wedge, f.name) for f in fields(wedge)}
    args.update(kw)
    with pytest.raises(ValidationError):
        type(wedge)(**args)


# --- splash detection ---------------------------------------------------------------------

def test_splash_time_from_distances_interpolates():
    t = np.array([0.0, 0.1, 0.2, 0.3])
    d = np.array([1.0, 0.8, 0.4, 0.1])
    assert detect_splash_time(t, delta_splash=0.6, distances=d) == pytest.approx(0.15)
    assert detect_splash_time(t, delta_splash=0.05, distances=d) is None
    assert detect_splash_time(t, delta_splash=2.0, distances=d) == 0.0
    with pytest.raises(ValidationError):
        detect_splash_time(t)


def _slot(gap, n=200):
    # two long parallel sides joined by short ends; the sides are `gap` apart
    x = np.linspace(0, 4, n, endpoint=False)
    e = np.linspace(0, gap, 6, endpoint=False)
    return np.concatenate([np.stack([x, 0 * x], -1), np.stack([4 + 0 * e, e], -1),
                           np.stack([4 - x, gap + 0 * x], -1), np.stack([0 * e, gap - e], -1)])


def test_splash_time_from_curves_bisects():
    # the gap closes linearly from 0.4 to 0.1 over one step of an equal-index family
    times = [0.0, 1.0]
    a, b = _slot(0.4), _slot(0.1)
    t = detect_splash_time(times, [a, b], delta_splash=0.25)
    assert t == pytest.approx(0.5, abs=1e-9)


def test_menger_curvature_of_circle():
    c = circle(200, 2.0).nodes
    assert np.allclose(discrete_curvature(c), 0.5, rtol=1e-3)


# --- family pieces ----------------------------------------------------------------------------

def test_shifted_reference_translates_mesh(wedge, wedge_base):
    assert shifted_reference(wedge_base, wedge, 0.0) is wedge_base.reference
    ref = shifted_reference(wedge_base, wedge, 0.01)
    assert np.allclose(ref.mesh.nodes - wedge_base.mesh.nodes, 0.01 * wedge.b, atol=1e-12)
    assert np.array_equal(ref.v0, wedge_base.reference.v0)
    assert np.array_equal(ref.G0, wedge_base.reference.G0)


def test_default_delta_is_a_few_boundary_spacings(wedge, wedge_base):
    d = default_delta(wedge, wedge_base)
    assert 0 < d < 0.05 * wedge.image_polyline().length
    assert wedge_base.loop_params.shape == (len(wedge_base.mesh.boundary_p2_loop),)


@pytest.fixture(scope="module")
def disk_ref():
    m = build_mesh(arclength_normalize(circle(64, 0.5, (1.5, 0.5))), 0.2)
    x, y = m.nodes.T
    # weak rotation: re-seeded slabs of incompatible data pass the per-iteration trace check
    v0 = 0.03 * np.stack([-(y - 0.5), x - 1.5], -1)
    return reference_from_nodal(m, ConformalMap(0j), v0, np.zeros_like(v0))


def test_chain_lands_on_end_time(disk_ref):
    cfg = PicardConfig(T=0.04, n_steps=4, norm="l2h1", compute_ball=False, max_halvings=0)
    run = run_chain(disk_ref, disk_ref.cmap, 0.11, cfg)
    assert run.times[-1] == pytest.approx(0.11)
    assert np.allclose(np.diff(run.times), 0.01)
    assert len(run.reports) == 3
    assert run.X.shape == (12, disk_ref.mesh.n_nodes, 2)
    # a remainder shorter than three steps is split into three finer ones
    short = run_chain(disk_ref, disk_ref.cmap, 0.1, cfg)
    assert np.allclose(np.diff(short.times)[-3:], 0.02 / 3)
    assert np.allclose(run.X[0], disk_ref.omega)
    back = run.shifted_back([1.0, 0.0])
    assert np.array_equal(back.X, run.X)


def test_moved_mesh_keeps_connectivity(disk_ref):
    m = disk_ref.mesh
    X = m.nodes + 0.01 * m.nodes ** 2
    mm = moved_mesh(m, X)
    assert np.array_equal(mm.triangles, m.triangles)
    assert np.allclose(mm.vertices, X[: m.n_vertices])
    assert np.allclose(np.linalg.norm(mm.boundary_vertex_normals, axis=1), 1.0)


def test_stability_rows_and_grid_check(disk_ref):
    m = disk_ref.mesh
    times = np.linspace(0, 0.1, 3)
    X0 = np.broadcast_to(m.nodes, (3,) + m.nodes.shape).copy()
    base = ChainedRun(0.0, times, X0, None, None, [], m)
    shift = np.array([1e-3, 0.0])
    moved = ChainedRun(1e-3, times, X0 + shift, None, None, [], m)
    (row,) = stability_table(base, [(1e-3, moved)])
    assert row["hausdorff"] == pytest.approx(1e-3, rel=1e-6)
    assert row["hausdorff_ratio"] == pytest.approx(1.0, rel=1e-6)
    assert row["flux_diff"] > 0
    with pytest.raises(GridMismatch):
        stability_table(base, ChainedRun(1e-3, times[:2], X0[:2], None, None, [], m))


def test_report_serialisation(tmp_path):
    rep = SplashReport(t_bar=0.1, delta_splash=0.01)
    rep.per_epsilon[0.01] = MemberResult(0.01, times=[0.0, 0.1], min_distance=[0.5, float("nan")],
                                         t_star=0.05)
    rep.curves[0.01] = ([0.0, 0.1], [np.zeros((3, 2)), np.ones((3, 2))])
    rep.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["per_epsilon"]["0.01"]["t_star"] == 0.05
    assert data["per_epsilon"]["0.01"]["min_distance"][1] == "nan"
    (p,) = rep.write_curves_csv(tmp_path / "curves")
    lines = p.read_text().splitlines()
    assert lines[0] == "t,node,x,y" and len(lines) == 7
    assert rep.detected() == {0.01: 0.05}
