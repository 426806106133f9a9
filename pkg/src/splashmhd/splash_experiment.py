"""Shifted-domain family: splash timing and stability under the shift.

The base reference domain touches the line through the branch point at two
antipodal boundary points, so its image under ``w -> w**2`` touches itself.
Shifting it by ``eps * b`` away from that line separates the two image arcs
by about ``4 |w_tip| eps``; the initial velocity pushes both tips outward,
and the shifted images close the gap in finite time.

Each family member carries the same nodal initial fields on the translated
mesh, is integrated by chained Picard slabs up to ``t_bar`` and is compared
with the unshifted run after translating back.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .conformal import ConformalMap, as_complex, as_real
from .errors import GridMismatch, SplashError, ValidationError
from .geometry import (BoundaryCurve, arclength_normalize, frame_at, hausdorff_distance,
                       min_arc_distance, self_intersects, tubular_coords)
from .initdata import (FourierProfile, PolynomialStream, StreamSpec, bump_flux_profile,
                       build_initial_data, check_compatibility, physical_boundary)
from .mesh_fields import (BealeNormConfig, DiscreteField, ReferenceMesh, build_mesh,
                          compute_eigenbasis, sobolev_norm)
from .picard import (IterationReport, LagrangianState, PicardConfig, ReferenceProfiles,
                     build_reference, reference_from_nodal, run_picard)

log = logging.getLogger(__name__)


# --- preset geometry ------------------------------------------------------------------

def banana_points(a: float = 0.25, n: int = 8192) -> np.ndarray:
    """Annular sector of mid radius 1 and half-width ``a`` with round caps.

    The sector is symmetric about the direction ``exp(i pi/4)`` and its caps
    reach the same distance along it. Returns complex samples at uniform
    arc length, counterclockwise.
    """
    if not 0 < a < 0.5:
        raise ValidationError("banana half-width must lie in (0, 0.5)")
    half = np.pi / 2 - np.arcsin(a)
    t1, t2 = np.pi / 4 - half, np.pi / 4 + half
    c1, c2 = np.exp(1j * t1), np.exp(1j * t2)
    lens = np.array([(1 + a) * (t2 - t1), np.pi * a, (1 - a) * (t2 - t1), np.pi * a])
    edges = np.concatenate([[0.0], np.cumsum(lens)])
    s = np.arange(n) * edges[-1] / n
    piece = np.searchsorted(edges, s, side="right") - 1
    u = s - edges[piece]
    z = np.empty(n, complex)
    k = piece == 0
    z[k] = (1 + a) * np.exp(1j * (t1 + u[k] / (1 + a)))
    k = piece == 1
    z[k] = c2 + a * np.exp(1j * (t2 + u[k] / a))
    k = piece == 2
    z[k] = (1 - a) * np.exp(1j * (t2 - u[k] / (1 - a)))
    k = piece == 3
    z[k] = c1 + a * np.exp(1j * (t1 + np.pi + u[k] / a))
    return z


def splash_seed_curve(a: float = 0.25, scale: float = 3.0, sigma: float = 0.05,
                      n_nodes: int = 400, n_dense: int = 8192):
    """Smoothed banana placed so that it touches the line ``Re(w conj(b)) = 0``.

    The piecewise-circular outline has curvature jumps where caps meet
    arcs; a periodic Gaussian filter of width ``sigma`` (before scaling)
    removes them. The result touches the line at two antipodal points,
    whose images under ``w -> w**2`` coincide.

    Returns
    -------
    curve : BoundaryCurve
        Arc-length normalized.
    b : ndarray (2,)
        Unit direction away from the line.
    tips : ndarray (2, 2)
        The two touching points.
    """
    z = banana_points(a, n_dense)
    L = np.sum(np.abs(np.diff(np.r_[z, z[:1]])))
    k = np.fft.fftfreq(n_dense, d=L / n_dense)
    z = np.fft.ifft(np.fft.fft(z) * np.exp(-0.5 * (2 * np.pi * k * sigma) ** 2)) * scale
    b = np.exp(1j * np.pi / 4)
    d = (z * np.conj(b)).real
    z = z - d.min() * b
    curve = arclength_normalize(BoundaryCurve(as_real(z)), n_nodes)
    # the two minima sit on opposite caps (one on each side of the symmetry axis)
    return curve, as_real(b), touching_points(curve, as_real(b))


# --- scenario -------------------------------------------------------------------------------

@dataclass(eq=False)
class SplashScenario:
    """Everything needed to run the shifted family.

    ``psi0`` is a function of the clockwise physical arc length (as in
    :class:`~splashmhd.initdata.StreamSpec`); ``positive_arcs`` are given in the
    same parameter. ``arc_windows`` are reference-curve parameter windows in
    which splash witnesses must lie.
    """

    base_tilde_domain: BoundaryCurve
    cmap: ConformalMap
    b: np.ndarray
    epsilons: tuple
    psi0: FourierProfile
    lambda_max: float
    h_stream: PolynomialStream = field(default_factory=PolynomialStream)
    positive_arcs: tuple | None = None
    t_bar: float = 0.1
    delta_splash: float | None = None
    h_target: float = 0.24
    n_boundary: int = 1600
    tip_params: tuple = ()
    arc_windows: tuple = ()
    separation: float = 0.25

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        nb = np.linalg.norm(self.b)
        if not np.isfinite(nb) or nb == 0:
            raise ValidationError("shift direction b must be nonzero")
        self.b = self.b / nb
        self.epsilons = tuple(float(e) for e in self.epsilons)
        if any(e <= 0 for e in self.epsilons):
            raise ValidationError("epsilons must be positive")
        if self.t_bar <= 0:
            raise ValidationError("t_bar must be positive")
        if self.h_target <= 0:
            raise ValidationError("h_target must be positive")
        if self.delta_splash is not None and self.delta_splash <= 0:
            raise ValidationError("delta_splash must be positive")
        if not 0 < self.separation < 0.5:
            raise ValidationError("separation is a fraction of the curve length in (0, 0.5)")

    @property
    def stream_spec(self) -> StreamSpec:
        return StreamSpec(self.psi0, self.lambda_max, positive_arcs=self.positive_arcs)

    def image_polyline(self, eps: float = 0.0, n: int | None = None) -> BoundaryCurve:
        """``P^{-1}`` of the shifted reference boundary, with the tips as nodes."""
        c = self.base_tilde_domain
        n = n or self.n_boundary
        L = c.length
        r = np.arange(n) * L / n
        r = np.sort(np.concatenate([r, np.asarray(self.tip_params, dtype=float) % L]))
        w = c.evaluate(r) + eps * self.b
        return BoundaryCurve(as_real(as_complex(w) ** 2 + self.cmap.alpha), enforce_ccw=False)

    def contact_tolerance(self) -> float:
        seg = self.image_polyline().segment_lengths
        return 1e-3 * float(np.median(seg))

    def check(self) -> dict:
        """Scenario invariants: simple shifted images and a self-touching seed.

        Raises
        ------
        ValidationError
            Naming the failing invariant.
        """
        tol = self.contact_tolerance()
        if not self_intersects(self.image_polyline(0.0), tol):
            raise ValidationError("invariant violated: the unshifted image does not touch itself")
        for e in self.epsilons:
            hits = self_intersects(self.image_polyline(e), tol)
            if hits:
                raise ValidationError(
                    f"invariant violated: image of the domain shifted by eps={e:g} is not simple "
                    f"(contact near {hits[0][2]})")
        return {"seed_contact": True, "shifted_simple": list(self.epsilons)}


def touching_points(curve: BoundaryCurve, b) -> np.ndarray:
    """Lowest point along ``b`` on each side of the axis through 0 in direction ``b``.

    The lowest node on each side is refined on the boundary spline.
    """
    w = as_complex(curve.nodes)
    bc = complex(*np.asarray(b, dtype=float))
    d = (w * np.conj(bc)).real
    side = (w * np.conj(1j * bc)).real > 0
    if side.all() or not side.any():
        raise ValidationError("curve does not straddle the shift axis")
    r_nodes = curve.node_params()
    ds = float(np.max(curve.segment_lengths))
    bv = np.array([bc.real, bc.imag])
    out = []
    for mask in (side, ~side):
        r0 = r_nodes[np.flatnonzero(mask)[np.argmin(d[mask])]]
        res = minimize_scalar(lambda r: float(curve.evaluate(r) @ bv),
                              bounds=(r0 - ds, r0 + ds), method="bounded",
                              options={"xatol": 1e-12 * curve.length})
        out.append(curve.evaluate(res.x))
    return np.array(out)


def aimed_scenario(curve: BoundaryCurve, cmap: ConformalMap, b, length_scale: float = 1.0,
                   amplitude: float = 1.0, epsilons=(1e-2, 5e-3, 2.5e-3), t_bar: float = 0.1,
                   delta_splash: float | None = 0.01, h_target: float | None = None,
                   h_stream: PolynomialStream | None = None, psi0: FourierProfile | None = None,
                   lambda_max: float | None = None, bump_width: float | None = None,
                   arc_halfwidth: float | None = None, n_boundary: int = 1600) -> SplashScenario:
    """Scenario whose initial velocity pushes the two touching points outward.

    ``length_scale`` is the reference-domain size relative to the unit
    banana; physical design lengths (layer width 0.25, bump width 0.4,
    positive arcs of half-width 0.15) scale with its square.
    """
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    tips = touching_points(curve, b)
    r_tips = tuple(float(tubular_coords(curve, t)[0]) for t in tips)
    pb = physical_boundary(curve, cmap, n_boundary)
    L = pb.curve.length
    rho = [float((L - pb.s_of_r(r)) % L) for r in r_tips]
    s2 = length_scale ** 2
    width = 0.4 * s2 if bump_width is None else bump_width
    half = 0.15 * s2 if arc_halfwidth is None else arc_halfwidth
    if psi0 is None:
        psi0 = bump_flux_profile(L, rho, width, amplitude)
    arcs = tuple((p - half, p + half) for p in rho)
    if h_stream is None:
        h_stream = PolynomialStream(((1, 0, 0.3 * amplitude), (1, 1, 0.2 * amplitude / s2)))
    win = 0.1 * curve.length
    windows = tuple((r - win, r + win) for r in r_tips)
    return SplashScenario(curve, cmap, b, tuple(epsilons), psi0,
                          0.25 * s2 if lambda_max is None else lambda_max, h_stream, arcs, t_bar,
                          delta_splash, 0.08 * length_scale if h_target is None else h_target,
                          n_boundary, r_tips, windows)


def fig3_wedge(scale: float = 3.0, amplitude: float = 1.0, magnetic: bool = True,
               **kw) -> SplashScenario:
    """Preset: smoothed banana touching the cut line, velocity aimed at both tips.

    ``scale`` enlarges the reference domain (the physical one by its square).
    The default keeps the boundary layer of compatible data several cells
    wide and its viscous time scale well above a slab of length 0.05.
    Remaining keywords go to :func:`aimed_scenario`.
    """
    curve, b, _ = splash_seed_curve(scale=scale)
    cmap = kw.pop("cmap", None) or ConformalMap(0j, scale=2.5 * scale ** 2)
    if not magnetic:
        kw["h_stream"] = PolynomialStream()
    return aimed_scenario(curve, cmap, b, scale, amplitude, **kw)


# --- meshes and initial data ------------------------------------------------------------

@dataclass(eq=False)
class BaseSetup:
    mesh: ReferenceMesh
    init: object            # InitialData
    reference: ReferenceProfiles
    compatibility: object   # CompatibilityReport
    loop_params: np.ndarray  # base-curve parameter of each P2 boundary loop node


def build_base(sc: SplashScenario) -> BaseSetup:
    """Mesh, initial data and reference profiles of the unshifted domain."""
    mesh = build_mesh(sc.base_tilde_domain, sc.h_target, pinned=list(sc.tip_params))
    init = build_initial_data(mesh, sc.base_tilde_domain, sc.cmap, sc.stream_spec, sc.h_stream,
                              sc.n_boundary)
    rep = check_compatibility(init)
    ref = build_reference(init, sc.cmap)
    loop_pts = mesh.nodes[mesh.boundary_p2_loop]
    r = np.asarray(tubular_coords(sc.base_tilde_domain, loop_pts)[0])
    return BaseSetup(mesh, init, ref, rep, r)


def shifted_mesh(mesh: ReferenceMesh, shift) -> ReferenceMesh:
    """Translated copy sharing connectivity and boundary normals."""
    shift = np.asarray(shift, dtype=float)
    return ReferenceMesh(mesh.vertices + shift, mesh.triangles, mesh.boundary_loop,
                         mesh.boundary_vertex_normals)


def shifted_reference(base: BaseSetup, sc: SplashScenario, eps: float) -> ReferenceProfiles:
    """Same nodal initial fields carried to the shifted domain."""
    if eps == 0:
        return base.reference
    mesh = shifted_mesh(base.mesh, eps * sc.b)
    # the Laplacian is translation invariant
    return reference_from_nodal(mesh, sc.cmap, base.reference.v0, base.reference.G0,
                                base.reference.lap_v0)


def moved_mesh(mesh: ReferenceMesh, X: np.ndarray) -> ReferenceMesh:
    """Straight-sided mesh with vertices at ``X`` (P2 nodal flux values).

    Boundary normals come from a spline through the moved P2 boundary loop.
    """
    verts = X[: mesh.n_vertices]
    loop = X[mesh.boundary_p2_loop]
    c = arclength_normalize(BoundaryCurve(loop, enforce_ccw=False), len(loop))
    r = np.asarray(tubular_coords(c, verts[mesh.boundary_loop])[0])
    normals = frame_at(c, r)[1]
    return ReferenceMesh(verts, mesh.triangles, mesh.boundary_loop, normals)


# --- chained slabs ------------------------------------------------------------------------

@dataclass(eq=False)
class ChainedRun:
    """Concatenated slabs of one family member.

    ``X`` holds flux values of the original labels at ``times``; ``v`` and
    ``G`` the matching velocity and magnetic field samples.
    """

    eps: float
    times: np.ndarray
    X: np.ndarray
    v: np.ndarray
    G: np.ndarray
    reports: list
    base_mesh: ReferenceMesh

    def tilde_boundary(self, k: int) -> np.ndarray:
        return self.X[k][self.base_mesh.boundary_p2_loop]

    def shifted_back(self, b) -> "ChainedRun":
        s = self.eps * np.asarray(b, dtype=float)
        return ChainedRun(0.0, self.times, self.X - s, self.v, self.G, self.reports, self.base_mesh)


def run_chain(ref: ReferenceProfiles, cmap: ConformalMap, t_bar: float,
              config: PicardConfig, label_mesh: ReferenceMesh | None = None) -> ChainedRun:
    """Picard slabs from ``t = 0`` to ``t_bar``, re-seeding at each slab end.

    The last slab is shortened to land on ``t_bar``. It keeps the step size
    unless that leaves fewer than three steps, in which case it takes three.
    """
    label_mesh = label_mesh or ref.mesh
    t0 = 0.0
    times, Xs, vs, Gs, reps = [0.0], [ref.omega.copy()], [ref.v0.copy()], [ref.G0.copy()], []
    dt = config.T / config.n_steps
    cur = ref
    while t0 < t_bar - 1e-12 * max(1.0, t_bar):
        left = t_bar - t0
        if left < config.T - 1e-12:
            n = max(3, int(round(left / dt)))
            cfg = replace(config, T=left, n_steps=n)
        else:
            cfg = config
        state, rep = run_picard(None, cmap, config=cfg, reference=cur)
        reps.append(rep)
        tt = t0 + state.times[1:]
        times.extend(tt.tolist())
        Xs.extend(state.X[1:])
        vs.extend(state.v[1:])
        Gs.extend(state.G[1:])
        t0 = float(tt[-1])
        if t0 < t_bar - 1e-12 * max(1.0, t_bar):
            mesh = moved_mesh(cur.mesh, state.X[-1])
            cur = reference_from_nodal(mesh, cmap, state.v[-1], state.G[-1])
    return ChainedRun(0.0, np.asarray(times), np.asarray(Xs), np.asarray(vs), np.asarray(Gs),
                      reps, label_mesh)


# --- splash detection -----------------------------------------------------------------------

def _curve(nodes) -> BoundaryCurve:
    return BoundaryCurve(np.asarray(nodes, dtype=float), enforce_ccw=False)


def arc_distance(nodes, separation: float = 0.25):
    """``min_arc_distance`` with a separation of ``separation`` times the length."""
    c = _curve(nodes)
    return min_arc_distance(c, window_length=separation * c.length)


def detect_splash_time(times, curves=None, delta_splash: float = 0.0, distances=None,
                       separation: float = 0.25, n_bisect: int = 40):
    """First time the arc distance drops below ``delta_splash``.

    With ``curves`` (sequence of (n, 2) node arrays on a common index set)
    the bracketing step is refined by bisection on linearly interpolated
    curves. With only ``distances`` the crossing of their linear
    interpolant is returned. ``None`` when the threshold is never reached.
    """
    times = np.asarray(times, dtype=float)
    if distances is None:
        if curves is None:
            raise ValidationError("need curves or distances")
        distances = [arc_distance(c, separation)[0] for c in curves]
    d = np.asarray(distances, dtype=float)
    below = np.flatnonzero(d < delta_splash)
    if len(below) == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(times[0])
    ta, tb = times[k - 1], times[k]
    if curves is None:
        da, db = d[k - 1], d[k]
        return float(ta + (da - delta_splash) / (da - db) * (tb - ta))
    ca, cb = np.asarray(curves[k - 1]), np.asarray(curves[k])
    lo, hi = 0.0, 1.0
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if arc_distance((1 - mid) * ca + mid * cb, separation)[0] < delta_splash:
            hi = mid
        else:
            lo = mid
    return float(ta + hi * (tb - ta))


def discrete_curvature(nodes) -> np.ndarray:
    """Menger curvature at each node of a closed polyline."""
    p = np.asarray(nodes, dtype=float)
    a, b = p - np.roll(p, 1, axis=0), np.roll(p, -1, axis=0) - p
    cr = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) * np.linalg.norm(a + b, axis=1)
    return 2 * cr / np.where(den > 0, den, np.inf)


# --- family ---------------------------------------------------------------------------------

@dataclass
class MemberResult:
    eps: float
    times: list = field(default_factory=list)
    min_distance: list = field(default_factory=list)
    witnesses: list = field(default_factory=list)   # (r_a, r_b) reference-curve parameters
    t_star: float | None = None
    monotone: bool = False
    witnesses_on_arcs: bool | None = None
    curvature_at_splash: float | None = None
    contraction: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    reference_trace_defect: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SplashReport:
    per_epsilon: dict = field(default_factory=dict)   # eps -> MemberResult
    stability: list = field(default_factory=list)
    t_bar: float = 0.0
    delta_splash: float = 0.0
    scenario_checks: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict, repr=False)   # eps -> (times, list of (n,2))

    def detected(self) -> dict:
        return {e: m.t_star for e, m in self.per_epsilon.items() if m.t_star is not None}

    def to_dict(self) -> dict:
        return {"t_bar": self.t_bar, "delta_splash": self.delta_splash,
                "scenario_checks": self.scenario_checks,
                "per_epsilon": {repr(e): m.to_dict() for e, m in sorted(self.per_epsilon.items())},
                "stability": self.stability}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True))

    def write_curves_csv(self, directory) -> list:
        """One CSV per member: ``t,node,x,y`` rows of the physical boundary."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = []
        for e in sorted(self.curves):
            times, curves = self.curves[e]
            p = d / f"curves_eps_{e!r}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "node", "x", "y"])
                for t, c in zip(times, curves):
                    for i, (x, y) in enumerate(np.asarray(c).tolist()):
                        w.writerow([repr(float(t)), i, repr(x), repr(y)])
            out.append(p)
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, np.integer):
        return int(x)
    return x


def physical_curves(run: ChainedRun, cmap: ConformalMap) -> list:
    return [as_real(as_complex(run.tilde_boundary(k)) ** 2 + cmap.alpha)
            for k in range(len(run.times))]


def _in_windows(r, windows, L):
    return any(((r - a) % L) <= ((b - a) % L) for a, b in windows)


def _summarize(run: ChainedRun, sc: SplashScenario, base: BaseSetup, delta: float) -> tuple:
    res = MemberResult(run.eps, times=run.times.tolist())
    curves = physical_curves(run, sc.cmap)
    L = sc.base_tilde_domain.length
    for c in curves:
        d, ra, rb = arc_distance(c, sc.separation)
        res.min_distance.append(float(d))
        poly = _curve(c)
        par = poly.param
        ia = int(np.searchsorted(par, ra, side="right") - 1) % len(par)
        ib = int(np.searchsorted(par, rb, side="right") - 1) % len(par)
        res.witnesses.append((float(base.loop_params[ia]), float(base.loop_params[ib])))
    dist = np.asarray(res.min_distance)
    res.t_star = detect_splash_time(run.times, curves, delta, distances=dist,
                                    separation=sc.separation)
    stop = len(dist) if res.t_star is None else int(np.searchsorted(run.times, res.t_star)) + 1
    seg = dist[:max(stop, 2)]
    res.monotone = bool(np.all(np.diff(seg) < 0))
    if res.t_star is not None:
        k = min(int(np.searchsorted(run.times, res.t_star)), len(curves) - 1)
        ra, rb = res.witnesses[k]
        if sc.arc_windows:
            res.witnesses_on_arcs = bool(
                (_in_windows(ra, sc.arc_windows[:1], L) and _in_windows(rb, sc.arc_windows[1:], L))
                or (_in_windows(rb, sc.arc_windows[:1], L) and _in_windows(ra, sc.arc_windows[1:], L)))
        res.curvature_at_splash = float(np.abs(discrete_curvature(curves[k])).max())
    res.contraction = [r.contraction_ratio for r in run.reports]
    res.halvings = [r.halvings for r in run.reports]
    res.reference_trace_defect = run.reports[0].reference_trace_defect if run.reports else {}
    return res, curves


def stability_table(run0: ChainedRun, runs_eps, s: float = 2.25,
                    norms: BealeNormConfig | None = None) -> list:
    """Flux and boundary distances of each (shifted-back) member to the base run.

    Parameters
    ----------
    runs_eps : ChainedRun or sequence of ChainedRun
        Members already translated back to the base domain; their ``eps``
        attribute labels the rows (``eps`` read from ``label`` if given as
        ``(eps, run)`` pairs).
    s : float
        Flux differences are measured in ``sup_t H^{s+1}``.

    Raises
    ------
    GridMismatch
        If a member's time grid or label set differs from the base run.
    """
    if isinstance(runs_eps, ChainedRun):
        runs_eps = [(runs_eps.eps, runs_eps)]
    rows = []
    mesh = run0.base_mesh
    cfg = norms or BealeNormConfig(s=s if 2 < s < 2.5 else 2.25)
    compute_eigenbasis(mesh, cfg.n_space_modes)
    loop = mesh.boundary_p2_loop
    for item in runs_eps:
        eps, run = item if isinstance(item, tuple) else (item.eps, item)
        if run.X.shape != run0.X.shape or not np.allclose(run.times, run0.times, rtol=0,
                                                            atol=1e-12 * max(1.0, run0.times[-1])):
            raise GridMismatch(f"eps={eps:g}: grids differ ({run.X.shape} vs {run0.X.shape})")
        flux = haus = 0.0
        for k in range(len(run0.times)):
            diff = run.X[k] - run0.X[k]
            if np.any(diff):
                flux = max(flux, sobolev_norm(DiscreteField.from_nodal(mesh, "P2-vector", diff),
                                              s + 1, cfg))
                haus = max(haus, hausdorff_distance(_curve(run0.X[k][loop]), _curve(run.X[k][loop])))
        rows.append({"eps": float(eps), "flux_diff": float(flux), "hausdorff": float(haus),
                     "flux_ratio": float(flux / eps) if eps else 0.0,
                     "hausdorff_ratio": float(haus / eps) if eps else 0.0})
    return rows


def run_member(sc: SplashScenario, base: BaseSetup, eps: float, config: PicardConfig) -> ChainedRun:
    ref = shifted_reference(base, sc, eps)
    run = run_chain(ref, sc.cmap, sc.t_bar, config, label_mesh=base.mesh)
    run.eps = eps
    return run


def default_delta(sc: SplashScenario, base: BaseSetup) -> float:
    """Three times the median physical spacing of the mesh boundary nodes."""
    c = physical_curves(ChainedRun(0.0, np.zeros(1), base.mesh.nodes[None], None, None, [],
                                   base.mesh), sc.cmap)[0]
    return 3.0 * float(np.median(_curve(c).segment_lengths))


def run_family(sc: SplashScenario, config: PicardConfig | None = None, workers: int = 1,
               base: BaseSetup | None = None, keep_runs: bool = False):
    """Run the unshifted seed and every shifted member; assemble the report.

    Failures of one member are recorded in its entry and do not stop the
    others. With ``keep_runs`` the chained runs are returned as well.
    """
    config = config or PicardConfig(norm="l2h1", compute_ball=False)
    checks = sc.check()
    base = base or build_base(sc)
    delta = sc.delta_splash if sc.delta_splash is not None else default_delta(sc, base)
    report = SplashReport(t_bar=sc.t_bar, delta_splash=delta, scenario_checks=checks)
    report.scenario_checks["compatibility_failures"] = list(base.compatibility.failures)
    eps_all = [0.0] + list(sc.epsilons)

    def job(e):
        try:
            return e, run_member(sc, base, e, config), None
        except SplashError as exc:
            log.warning("member eps=%g failed: %s", e, exc)
            return e, None, f"{type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, eps_all))
    else:
        results = [job(e) for e in eps_all]
    runs = {}
    for e, run, err in results:
        if run is None:
            report.per_epsilon[e] = MemberResult(e, error=err)
            continue
        res, curves = _summarize(run, sc, base, delta)
        report.per_epsilon[e] = res
        report.curves[e] = (run.times.tolist(), curves)
        runs[e] = run
    if 0.0 in runs:
        members = [(e, runs[e].shifted_back(sc.b)) for e in sc.epsilons if e in runs]
        try:
            report.stability = stability_table(runs[0.0], members)
        except GridMismatch as exc:
            report.scenario_checks["stability_error"] = str(exc)
    return (report, runs) if keep_runs else report
