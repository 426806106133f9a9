"""Closed planar curves: arc-length splines, frames, tubular coordinates and
proximity queries used for contact detection.

Conventions
-----------
Curves are stored counterclockwise. With unit tangent ``t = z'(r)`` the
outward normal is ``n = (t_2, -t_1)`` and curvature is measured against the
inward (left) normal, so a circle of radius ``R`` has ``kappa = 1/R``.
Tubular coordinates ``x = z(r) + lam * n(r)`` use ``lam > 0`` outside.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import AmbiguousProjection, DegenerateCurve, Outside, TubularOverlap

MIN_NODES = 8
CORNER_ANGLE = np.deg2rad(60.0)


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _clean_nodes(nodes, rtol=1e-12):
    pts = np.asarray(nodes, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        if np.iscomplexobj(pts):
            pts = np.stack([pts.real, pts.imag], axis=-1)
        else:
            raise DegenerateCurve("nodes must have shape (n, 2)")
    if len(pts) == 0:
        raise DegenerateCurve("empty curve")
    scale = max(np.ptp(pts, axis=0).max(), 1e-300)
    # drop the closing duplicate and consecutive repeats only; a figure eight
    # legitimately revisits a node
    if len(pts) > 1 and np.linalg.norm(pts[-1] - pts[0]) <= rtol * scale:
        pts = pts[:-1]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > rtol * scale
    return pts[keep]


class _ArcSpline:
    """Cubic spline of a closed curve in its arc-length parameter.

    Smooth curves use one periodic spline; curves with corners use one
    not-a-knot spline per smooth piece between corners.
    """

    def __init__(self, params, pts, length, corners):
        self.length = float(length)
        self.corners = np.asarray(corners, dtype=int)
        if len(self.corners) == 0:
            p = np.append(params, length)
            q = np.vstack([pts, pts[:1]])
            self.breaks = np.array([0.0, length])
            self.pieces = [CubicSpline(p, q, bc_type="periodic")]
            return
        n = len(pts)
        self.breaks = np.append(params[self.corners], length)
        self.pieces = []
        for k, c0 in enumerate(self.corners):
            c1 = self.corners[(k + 1) % len(self.corners)]
            idx = np.arange(c0, c1 + (n if c1 <= c0 else 0) + 1) % n
            pp = params[idx].copy()
            pp[1:][np.diff(pp) <= 0] += length
            pp = np.maximum.accumulate(pp)
            if len(idx) < 4:
                bc = "natural"
                if len(idx) == 2:
                    # straight piece; a linear spline is exact
                    pp = np.array([pp[0], (pp[0] + pp[1]) / 2, pp[1]])
                    qq = np.vstack([pts[idx[0]], pts[idx].mean(0), pts[idx[1]]])
                    self.pieces.append(CubicSpline(pp, qq, bc_type=bc))
                    continue
            else:
                bc = "not-a-knot"
            self.pieces.append(CubicSpline(pp, pts[idx], bc_type=bc))

    def __call__(self, r, nu=0):
        r = np.mod(np.asarray(r, dtype=float), self.length)
        if len(self.pieces) == 1:
            return self.pieces[0](r, nu)
        out = np.empty(r.shape + (2,))
        b0 = self.breaks[0]
        rr = np.mod(r - b0, self.length) + b0
        which = np.clip(np.searchsorted(self.breaks, rr, side="right") - 1,
                        0, len(self.pieces) - 1)
        for k, sp in enumerate(self.pieces):
            sel = which == k
            if np.any(sel):
                out[sel] = sp(rr[sel], nu)
        return out


def _detect_corners(pts):
    e = np.roll(pts, -1, axis=0) - pts
    e_prev = np.roll(e, 1, axis=0)
    cross = e_prev[:, 0] * e[:, 1] - e_prev[:, 1] * e[:, 0]
    dot = np.sum(e_prev * e, axis=1)
    turn = np.abs(np.arctan2(cross, dot))
    return np.flatnonzero(turn > CORNER_ANGLE)


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Closed planar curve, stored counterclockwise without the closing node.

    Parameters
    ----------
    nodes : array_like, shape (n, 2)
        Ordered nodes; the last connects back to the first. A repeated
        closing node is dropped.
    enforce_ccw : bool
        Reverse clockwise input so that the outward normal convention holds.
    """

    nodes: np.ndarray
    enforce_ccw: bool = True
    spline: _ArcSpline | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = _clean_nodes(self.nodes)
        if self.enforce_ccw and len(pts) >= 3 and signed_area(pts) < 0:
            pts = pts[::-1].copy()
        pts.setflags(write=False)
        object.__setattr__(self, "nodes", pts)

    @property
    def orientation(self) -> bool:
        """True when counterclockwise."""
        return signed_area(self.nodes) > 0

    @property
    def closed_nodes(self) -> np.ndarray:
        return np.vstack([self.nodes, self.nodes[:1]])

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.roll(self.nodes, -1, axis=0) - self.nodes, axis=1)

    @property
    def param(self) -> np.ndarray:
        """Cumulative polygonal arc length at each node."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)[:-1]])

    @property
    def polygon_length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def length(self) -> float:
        return self.spline.length if self.spline is not None else self.polygon_length

    @property
    def is_normalized(self) -> bool:
        return self.spline is not None

    @property
    def area(self) -> float:
        return abs(signed_area(self.nodes))

    def evaluate(self, r, nu: int = 0) -> np.ndarray:
        """Point (``nu=0``) or ``nu``-th arc-length derivative at ``r``."""
        if self.spline is None:
            raise DegenerateCurve("curve is not arc-length normalized")
        return self.spline(r, nu)

    def node_params(self) -> np.ndarray:
        """Spline parameters of the stored nodes (uniform after normalization)."""
        if self.spline is None:
            return self.param
        p = getattr(self, "_params", None)
        if p is not None:
            return p
        return np.arange(len(self.nodes)) * (self.length / len(self.nodes))


def _spline_length(sp: _ArcSpline, a, b, n=16):
    x, w = np.polynomial.legendre.leggauss(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    r = mid[:, None] + half[:, None] * x[None, :]
    speed = np.linalg.norm(sp(r.ravel(), 1), axis=1).reshape(r.shape)
    return half * (speed @ w)


def arclength_normalize(c: BoundaryCurve, n_nodes: int | None = None,
                        passes: int = 2) -> BoundaryCurve:
    """Resample ``c`` at uniform arc length on a cubic spline through its nodes.

    Parameters
    ----------
    c : BoundaryCurve
    n_nodes : int, optional
        Number of output nodes (default: same as input).
    passes : int
        Reparametrization passes; two bring ``|z'|`` to ``1 +- O(h^4)``.

    Raises
    ------
    DegenerateCurve
        Fewer than 8 nodes or vanishing length.
    """
    pts = c.nodes
    if len(pts) < MIN_NODES:
        raise DegenerateCurve(f"need at least {MIN_NODES} nodes, got {len(pts)}")
    scale = np.ptp(pts, axis=0).max()
    if c.polygon_length < 1e-12 * max(scale, 1.0) or scale == 0:
        raise DegenerateCurve("curve length below tolerance")
    n_out = int(n_nodes or len(pts))
    if n_out < MIN_NODES:
        raise DegenerateCurve(f"need at least {MIN_NODES} output nodes")

    corners = _detect_corners(pts)
    params = c.param
    sp = _ArcSpline(params, pts, c.polygon_length, corners)
    for _ in range(passes):
        # dense arc length table of the current spline
        m = max(8 * len(pts), 4 * n_out)
        knots = np.unique(np.concatenate([np.linspace(0, sp.length, m + 1), sp.breaks]))
        seg = _spline_length(sp, knots[:-1], knots[1:])
        s_tab = np.concatenate([[0.0], np.cumsum(seg)])
        L = s_tab[-1]
        # new uniform arc-length nodes, corners snapped onto grid nodes
        if len(corners):
            s_corner = np.interp(params[corners], knots, s_tab)
            targets, cidx = _uniform_with_corners(s_corner, L, n_out)
        else:
            targets, cidx = np.arange(n_out) * (L / n_out), np.array([], dtype=int)
        r_new = np.interp(targets, s_tab, knots)
        new_pts = sp(r_new)
        if len(corners):
            new_pts[cidx] = pts[corners]
        pts = new_pts
        params = targets
        corners = cidx
        sp = _ArcSpline(params, pts, L, corners)
    out = BoundaryCurve(pts, enforce_ccw=False, spline=sp)
    if len(corners):
        # corner-snapped grids are only piecewise uniform; keep exact params
        object.__setattr__(out, "_params", params)
    return out


def _uniform_with_corners(s_corner, L, n):
    """Arc-length targets with every corner on a node, nearly uniform spacing."""
    order = np.argsort(s_corner)
    s_corner = s_corner[order]
    gaps = np.diff(np.append(s_corner, s_corner[0] + L))
    counts = np.maximum(1, np.round(gaps / L * n).astype(int))
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < n:
        counts[np.argmax(gaps / counts)] += 1
    targets, idx = [], []
    for s0, g, k in zip(s_corner, gaps, counts):
        idx.append(len(targets))
        targets.extend(np.mod(s0 + g * np.arange(k) / k, L))
    targets = np.asarray(targets)
    shift = np.argmin(targets)
    targets = np.roll(targets, -shift)
    idx = (np.asarray(idx) - shift) % n
    return targets, idx


def node_params(c: BoundaryCurve) -> np.ndarray:
    """Spline parameter of each node of a normalized curve."""
    return c.node_params()


def frame_at(c: BoundaryCurve, r):
    """Unit tangent, outward unit normal and curvature at parameter(s) ``r``.

    Returns
    -------
    tangent, normal : ndarray, shape (..., 2)
    kappa : ndarray, shape (...)
    """
    if not c.is_normalized:
        raise DegenerateCurve("frame_at needs an arc-length normalized curve")
    d1 = c.evaluate(r, 1)
    d2 = c.evaluate(r, 2)
    speed = np.linalg.norm(d1, axis=-1)
    if np.any(speed < 1e-12):
        raise DegenerateCurve("vanishing speed")
    t = d1 / speed[..., None]
    n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    kappa = (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / speed ** 3
    return t, n, kappa


def max_curvature(c: BoundaryCurve, oversample: int = 4) -> float:
    r = np.linspace(0, c.length, oversample * len(c.nodes), endpoint=False)
    return float(np.abs(frame_at(c, r)[2]).max())


@dataclass(frozen=True, eq=False)
class TubularFrame:
    """Frame of the tubular neighbourhood ``|lam| < lambda_max``.

    ``T(r, lam) = (1 + lam kappa) t`` is the ``r``-derivative of
    ``x(r, lam)``; ``N = n`` is its ``lam``-derivative.
    """

    curve: BoundaryCurve
    lambda_max: float

    def __post_init__(self):
        kmax = max_curvature(self.curve)
        if self.lambda_max <= 0 or self.lambda_max * kmax >= 1.0:
            raise TubularOverlap(
                f"lambda_max={self.lambda_max:.4g} must lie in (0, 1/max|kappa|)"
                f" = (0, {1 / max(kmax, 1e-300):.4g})")

    def kappa(self, r):
        return frame_at(self.curve, r)[2]

    def T(self, r, lam):
        t, _, k = frame_at(self.curve, r)
        return (1.0 + np.asarray(lam) * k)[..., None] * t

    def N(self, r, lam=0.0):
        return frame_at(self.curve, r)[1]

    def point(self, r, lam):
        _, n, _ = frame_at(self.curve, r)
        return self.curve.evaluate(r) + np.asarray(lam)[..., None] * n


def foot_points(c: BoundaryCurve, pts, seeds, newton_iter: int = 20):
    """Newton refinement of foot-point parameters from given seeds.

    Parameters
    ----------
    pts : (m, 2)
    seeds : (m,) or (m, k) spline parameters

    Returns
    -------
    r, lam, dist : arrays shaped like ``seeds``
    """
    if not c.is_normalized:
        raise DegenerateCurve("projection needs an arc-length normalized curve")
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    r = np.array(seeds, dtype=float)
    squeeze = r.ndim == 1
    if squeeze:
        r = r[:, None]
    pp = p[:, None, :]
    h = c.length / len(c.nodes)
    for _ in range(newton_iter):
        z = c.evaluate(r)
        d1 = c.evaluate(r, 1)
        d2 = c.evaluate(r, 2)
        diff = z - pp
        g = np.sum(diff * d1, axis=-1)
        dg = np.sum(d1 * d1, axis=-1) + np.sum(diff * d2, axis=-1)
        ok = dg > 1e-14
        step = np.where(ok, g / np.where(ok, dg, 1.0), 0.0)
        r = r - np.clip(step, -2 * h, 2 * h)
        if np.all(np.abs(step) < 1e-15 * c.length):
            break
    r = np.mod(r, c.length)
    diff = pp - c.evaluate(r)
    lam = np.sum(diff * frame_at(c, r)[1], axis=-1)
    dist = np.linalg.norm(diff, axis=-1)
    if squeeze:
        return r[:, 0], lam[:, 0], dist[:, 0]
    return r, lam, dist


def projection_candidates(c: BoundaryCurve, pts, n_seeds: int = 4, newton_iter: int = 20):
    """Local foot points of ``pts`` on ``c`` from several nearest-node seeds.

    Returns
    -------
    r, lam, dist : ndarray, shape (m, n_seeds)
        Parameter, signed normal offset and distance per candidate.
    """
    if not c.is_normalized:
        raise DegenerateCurve("projection needs an arc-length normalized curve")
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    k = min(n_seeds, len(c.nodes))
    _, idx = _tree(c).query(p, k=k)
    idx = idx.reshape(len(p), k)
    r, lam, dist = foot_points(c, p, node_params(c)[idx], newton_iter)
    # a corner or non-converged seed falls back to the node itself
    pp = p[:, None, :]
    zn = c.nodes[idx]
    dn = np.linalg.norm(pp - zn, axis=-1)
    worse = dn < dist - 1e-14
    if np.any(worse):
        rn = node_params(c)[idx]
        r = np.where(worse, rn, r)
        lam = np.where(worse, np.sign(np.sum((pp - zn) * frame_at(c, rn)[1], -1)) * dn, lam)
        dist = np.where(worse, dn, dist)
    return r, lam, dist


def _tree(c: BoundaryCurve) -> cKDTree:
    t = getattr(c, "_kdtree", None)
    if t is None:
        t = cKDTree(c.nodes)
        object.__setattr__(c, "_kdtree", t)
    return t


def _cyclic_gap(a, b, L):
    d = np.abs(a - b) % L
    return np.minimum(d, L - d)


def tubular_coords(c: BoundaryCurve, p, lambda_max: float | None = None,
                   tie_tol: float | None = None):
    """Tubular coordinates ``(r, lam)`` of point(s) ``p``.

    Parameters
    ----------
    c : BoundaryCurve
        Normalized curve.
    p : array_like, shape (2,) or (m, 2)
    lambda_max : float, optional
        Half-width; points farther away raise :class:`Outside`.
    tie_tol : float, optional
        Two foot points on different arcs closer than this in distance
        raise :class:`AmbiguousProjection` (default ``1e-9 * length``).
    """
    single = np.ndim(p) == 1
    r, lam, dist = projection_candidates(c, p)
    tie_tol = 1e-9 * c.length if tie_tol is None else tie_tol
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(r))
    r_b, lam_b, d_b = r[rows, best], lam[rows, best], dist[rows, best]
    h = c.length / len(c.nodes)
    far = _cyclic_gap(r, r_b[:, None], c.length) > 3 * h
    tie = far & (dist - d_b[:, None] <= tie_tol)
    if np.any(tie):
        i = int(np.flatnonzero(tie.any(axis=1))[0])
        raise AmbiguousProjection(
            f"point {np.atleast_2d(p)[i]} is equidistant from two arcs")
    if lambda_max is not None and np.any(d_b > lambda_max):
        i = int(np.argmax(d_b))
        raise Outside(f"point {np.atleast_2d(p)[i]} is {d_b[i]:.4g} from the curve,"
                      f" beyond lambda_max={lambda_max:.4g}")
    if single:
        return float(r_b[0]), float(lam_b[0])
    return r_b, lam_b


# --- segment geometry --------------------------------------------------------

def point_segment_distance(p, a, b):
    """Distance from points to segments (broadcast) and the segment parameter."""
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    t = np.clip(np.sum((p - a) * ab, axis=-1) / denom, 0.0, 1.0)
    foot = a + t[..., None] * ab
    return np.linalg.norm(p - foot, axis=-1), t


def segment_segment_distance(a0, a1, b0, b1):
    """Distance between segment pairs (broadcast) with closest parameters.

    Returns
    -------
    dist, s, t : ndarray
        ``s`` on the first and ``t`` on the second segment.
    """
    a0, a1, b0, b1 = map(np.asarray, (a0, a1, b0, b1))
    da, db = a1 - a0, b1 - b0
    r = a0 - b0
    cross = lambda u, v: u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    den = cross(da, db)
    safe = np.where(np.abs(den) > 1e-300, den, 1.0)
    s_x = cross(b0 - a0, db) / safe
    t_x = cross(b0 - a0, da) / safe
    hit = (np.abs(den) > 1e-300) & (s_x >= 0) & (s_x <= 1) & (t_x >= 0) & (t_x <= 1)
    cands = []
    d, t = point_segment_distance(a0, b0, b1); cands.append((d, np.zeros_like(d), t))
    d, t = point_segment_distance(a1, b0, b1); cands.append((d, np.ones_like(d), t))
    d, s = point_segment_distance(b0, a0, a1); cands.append((d, s, np.zeros_like(d)))
    d, s = point_segment_distance(b1, a0, a1); cands.append((d, s, np.ones_like(d)))
    dist = np.stack([c[0] for c in cands])
    k = np.argmin(dist, axis=0)
    pick = lambda arr: np.take_along_axis(arr, k[None], 0)[0]
    dd = pick(dist)
    ss = pick(np.stack([c[1] for c in cands]))
    tt = pick(np.stack([c[2] for c in cands]))
    dd = np.where(hit, 0.0, dd)
    ss = np.where(hit, s_x, ss)
    tt = np.where(hit, t_x, tt)
    return dd, ss, tt


def _candidate_segment_pairs(pts, radius):
    """Pairs (i, j), i < j, of segments whose bounding boxes are within radius."""
    a = pts
    b = np.roll(pts, -1, axis=0)
    lo = np.minimum(a, b) - radius / 2
    hi = np.maximum(a, b) + radius / 2
    seglen = np.linalg.norm(b - a, axis=1)
    cell = max(float(np.median(seglen)), radius, 1e-300) * 2.0
    i0 = np.floor(lo / cell).astype(np.int64)
    i1 = np.floor(hi / cell).astype(np.int64)
    keys, owners = [], []
    for k in range(len(a)):
        for cx in range(i0[k, 0], i1[k, 0] + 1):
            for cy in range(i0[k, 1], i1[k, 1] + 1):
                keys.append((cx << 32) ^ (cy & 0xFFFFFFFF))
                owners.append(k)
    keys = np.asarray(keys)
    owners = np.asarray(owners)
    order = np.argsort(keys, kind="stable")
    keys, owners = keys[order], owners[order]
    bounds = np.flatnonzero(np.diff(keys)) + 1
    pairs = set()
    for grp in np.split(owners, bounds):
        if len(grp) < 2:
            continue
        g = np.unique(grp)
        ii, jj = np.triu_indices(len(g), 1)
        for p, q in zip(g[ii], g[jj]):
            pairs.add((int(p), int(q)))
    if not pairs:
        return np.empty((0, 2), dtype=int)
    return np.array(sorted(pairs))


def self_intersects(c: BoundaryCurve, tol: float):
    """Contacts between non-neighbouring parts of the closed polyline.

    Segments count as neighbours when fewer than two apart in index or when
    the arc between them is shorter than ``3 * tol`` (a smooth arc of
    length ``s`` subtends a chord close to ``s``). Near pairs are grouped
    into contacts; one representative is reported per contact.

    Returns
    -------
    list of (r_i, r_j, point)
        Polygonal arc-length parameters of the closest points (``r_i < r_j``)
        and their midpoint.
    """
    pts = c.nodes
    n = len(pts)
    if n < 4:
        return []
    seg = c.segment_lengths
    par = c.param
    L = c.polygon_length
    pairs = _candidate_segment_pairs(pts, tol)
    if len(pairs) == 0:
        return []
    i, j = pairs[:, 0], pairs[:, 1]
    idx_gap = np.minimum(np.abs(i - j), n - np.abs(i - j))
    # arc between the two segments, excluding the segments themselves
    arc_ij = par[j] - (par[i] + seg[i])
    arc_ji = L - (par[j] + seg[j]) + par[i]
    arc_gap = np.minimum(arc_ij, arc_ji)
    ok = (idx_gap >= 2) & (arc_gap >= 3 * tol)
    i, j = i[ok], j[ok]
    if len(i) == 0:
        return []
    nxt = lambda k: (k + 1) % n
    d, s, t = segment_segment_distance(pts[i], pts[nxt(i)], pts[j], pts[nxt(j)])
    near = d < tol
    i, j, d, s, t = i[near], j[near], d[near], s[near], t[near]
    if len(i) == 0:
        return []
    # cluster pairs that touch the same two arcs
    order = np.lexsort((j, i, d))
    used = np.zeros(len(i), dtype=bool)
    span = max(2, int(np.ceil(3 * tol / max(np.median(seg), 1e-300))) + 2)
    out = []
    for k in order:
        if used[k]:
            continue
        group = (
            (_cyclic_gap(i, i[k], n) <= span) & (_cyclic_gap(j, j[k], n) <= span)
        ) | ((_cyclic_gap(i, j[k], n) <= span) & (_cyclic_gap(j, i[k], n) <= span))
        group &= ~used
        used |= group
        pa = pts[i[k]] + s[k] * (pts[nxt(i[k])] - pts[i[k]])
        pb = pts[j[k]] + t[k] * (pts[nxt(j[k])] - pts[j[k]])
        ra = par[i[k]] + s[k] * seg[i[k]]
        rb = par[j[k]] + t[k] * seg[j[k]]
        if ra > rb:
            ra, rb = rb, ra
        out.append((float(ra), float(rb), 0.5 * (pa + pb)))
    out.sort(key=lambda x: (x[0], x[1]))
    return out


def min_arc_distance(c: BoundaryCurve, window: int = 10,
                     window_length: float | None = None):
    """Smallest distance between curve points at least ``window`` apart along it.

    Parameters
    ----------
    window : int
        Minimum separation in segments (ignored when ``window_length`` given).
    window_length : float, optional
        Minimum separation as arc length.

    Returns
    -------
    (distance, r_a, r_b)
        Arc-length parameters of the two witness points (spline parameter
        for normalized curves, polygonal otherwise).
    """
    pts = c.nodes
    n = len(pts)
    par = c.node_params()
    L = c.length
    seg = np.diff(np.append(par, L))
    if window_length is None:
        if window < 2:
            raise ValueError("window must be at least 2 segments")
        sep_min = window * L / n
    else:
        sep_min = float(window_length)
    # separations within a thousandth of a node spacing of the window count
    # as inside it, so a window of exactly k spacings admits k-apart nodes
    sep_min -= 1e-3 * L / n
    tree = _tree(c)
    radius = 4.0 * L / n
    best = None
    while best is None:
        pr = tree.query_pairs(radius, output_type="ndarray")
        if len(pr):
            gap = _cyclic_gap(par[pr[:, 0]], par[pr[:, 1]], L)
            pr = pr[gap >= sep_min]
        if len(pr):
            d = np.linalg.norm(pts[pr[:, 0]] - pts[pr[:, 1]], axis=1)
            k = int(np.argmin(d))
            best = (float(d[k]), int(pr[k, 0]), int(pr[k, 1]))
            cand = pr[d <= d[k] + 2 * L / n]
        elif radius > 2 * np.ptp(pts, axis=0).max() + L:
            return (np.inf, np.nan, np.nan)
        else:
            radius *= 2.0
    # refine on the segments adjacent to the best node pairs
    dbest, ra, rb = best[0], par[best[1]], par[best[2]]
    nxt = lambda k: (k + 1) % n
    prv = lambda k: (k - 1) % n
    I = np.concatenate([cand[:, 0], prv(cand[:, 0])])
    Jn = np.concatenate([cand[:, 1], prv(cand[:, 1])])
    I, Jn = np.meshgrid(np.unique(I), np.unique(Jn), indexing="ij")
    I, Jn = I.ravel(), Jn.ravel()
    if len(I) <= 4_000_000:
        d, s, t = segment_segment_distance(pts[I], pts[nxt(I)], pts[Jn], pts[nxt(Jn)])
        r1 = par[I] + s * seg[I]
        r2 = par[Jn] + t * seg[Jn]
        okk = _cyclic_gap(r1, r2, L) >= sep_min
        if np.any(okk):
            k = int(np.argmin(np.where(okk, d, np.inf)))
            if d[k] < dbest:
                dbest, ra, rb = float(d[k]), float(r1[k]), float(r2[k])
    return (dbest, float(ra), float(rb))


def hausdorff_distance(a: BoundaryCurve, b: BoundaryCurve, k: int = 3) -> float:
    """Symmetric Hausdorff distance between two closed polylines.

    Nodes of each curve are projected onto the segments of the other that
    touch its ``k`` nearest nodes.
    """
    return max(_directed_hausdorff(a, b, k), _directed_hausdorff(b, a, k))


def _directed_hausdorff(a, b, k):
    pb = b.nodes
    n = len(pb)
    _, idx = _tree(b).query(a.nodes, k=min(k, n))
    idx = np.atleast_2d(idx.reshape(len(a.nodes), -1))
    segs = np.concatenate([idx, (idx - 1) % n], axis=1)
    d, _ = point_segment_distance(a.nodes[:, None, :], pb[segs], pb[(segs + 1) % n])
    return float(d.min(axis=1).max())


# --- constructors and I/O ------------------------------------------------------

def circle(n: int = 128, radius: float = 1.0, center=(0.0, 0.0)) -> BoundaryCurve:
    th = 2 * np.pi * np.arange(n) / n
    pts = np.stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)], -1)
    return BoundaryCurve(pts)


def displaced(c: BoundaryCurve, shift) -> BoundaryCurve:
    """Rigid translation; a normalized curve stays normalized."""
    shift = np.asarray(shift, dtype=float)
    out = BoundaryCurve(c.nodes + shift, enforce_ccw=False)
    if c.spline is not None:
        return arclength_normalize(out, len(c.nodes), passes=1)
    return out


def read_curve(path) -> BoundaryCurve:
    """Load a curve from CSV (``x,y`` rows) or JSON (``{"nodes": [[x, y], ...]}``)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
        return BoundaryCurve(np.asarray(data["nodes"], dtype=float))
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in line.replace(";", ",").split(",") if p.strip()]
        try:
            rows.append([float(parts[0]), float(parts[1])])
        except ValueError:
            continue  # header row
    return BoundaryCurve(np.asarray(rows))


def write_curve(c: BoundaryCurve, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps({"nodes": c.nodes.tolist()}))
        return
    lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in c.nodes.tolist()]
    path.write_text("\n".join(lines) + "\n")
