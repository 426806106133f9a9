"""Taylor-Hood discretisation on a fixed reference domain, plus the
fractional space and space-time norms used as solver diagnostics.

Layout conventions
------------------
* P2 nodes are the mesh vertices followed by one midpoint per edge.
* Local P2 ordering per triangle: vertices 0, 1, 2, then the midpoints of
  edges (1, 2), (2, 0), (0, 1).
* Vector and tensor dofs are blocked by component: ``[u_x(all), u_y(all)]``;
  tensor components are ordered ``00, 01, 10, 11`` with ``(grad u)_ij =
  d_j u^i``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import triangle

from .errors import EigenbasisUnavailable, MeshingFailed, TooFewSamples, ValidationError
from .geometry import BoundaryCurve, frame_at, node_params

SPACES = {"P2-scalar": 1, "P2-vector": 2, "P2-tensor": 4, "P1-scalar": 1}

# degree-5 seven-point rule on the reference triangle (barycentric, weights sum to 1)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
    [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
])
QUAD_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)
EDGE_T = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
EDGE_W = np.array([5.0, 8.0, 5.0]) / 18.0


def p2_basis(L: np.ndarray):
    """P2 shape values and barycentric derivatives at barycentric points ``L``.

    Returns
    -------
    phi : (n, 6)
    dphi : (n, 6, 3)
        Derivatives with respect to the barycentric coordinates.
    """
    L0, L1, L2 = L[:, 0], L[:, 1], L[:, 2]
    phi = np.stack([L0 * (2 * L0 - 1), L1 * (2 * L1 - 1), L2 * (2 * L2 - 1),
                    4 * L1 * L2, 4 * L2 * L0, 4 * L0 * L1], axis=1)
    n = len(L)
    d = np.zeros((n, 6, 3))
    d[:, 0, 0] = 4 * L0 - 1
    d[:, 1, 1] = 4 * L1 - 1
    d[:, 2, 2] = 4 * L2 - 1
    d[:, 3, 1], d[:, 3, 2] = 4 * L2, 4 * L1
    d[:, 4, 2], d[:, 4, 0] = 4 * L0, 4 * L2
    d[:, 5, 0], d[:, 5, 1] = 4 * L1, 4 * L0
    return phi, d


def edge_p2_basis(t: np.ndarray) -> np.ndarray:
    """Values of the three P2 edge shapes (start, end, midpoint) at ``t``."""
    return np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=1)


@dataclass(eq=False)
class ReferenceMesh:
    """Straight-sided triangulation with P2/P1 dof maps and quadrature data.

    Parameters
    ----------
    vertices : (nv, 2)
    triangles : (nt, 3)
        Counterclockwise vertex triples.
    boundary_loop : (nb,)
        Boundary vertex indices in counterclockwise order.
    boundary_vertex_normals : (nb, 2), optional
        Outward unit normals of the generating curve at the loop vertices.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_loop: np.ndarray
    boundary_vertex_normals: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        tri = np.asarray(self.triangles, dtype=np.int64)
        p = self.vertices[tri]
        det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) \
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        flip = det < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        self.triangles = tri
        self.boundary_loop = np.asarray(self.boundary_loop, dtype=np.int64)
        self._build_edges()

    # --- topology ------------------------------------------------------------
    def _build_edges(self):
        tri = self.triangles
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        e = np.sort(tri[:, loc].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        self.edges = uniq
        self.tri_edges = inv.reshape(-1, 3)
        nv = len(self.vertices)
        self.tri6 = np.hstack([tri, nv + self.tri_edges])
        mid = 0.5 * (self.vertices[uniq[:, 0]] + self.vertices[uniq[:, 1]])
        self.nodes = np.vstack([self.vertices, mid])
        # boundary edges in loop order
        lookup = {tuple(k): i for i, k in enumerate(uniq.tolist())}
        loop = self.boundary_loop
        nxt = np.roll(loop, -1)
        try:
            be = np.array([lookup[tuple(sorted((int(a), int(b))))] for a, b in zip(loop, nxt)])
        except KeyError as exc:
            raise MeshingFailed("boundary loop does not follow mesh edges") from exc
        self.boundary_edges = be
        self.boundary_edge_vertices = np.stack([loop, nxt], axis=1)
        # loop of P2 nodes: v0, m01, v1, m12, ...
        self.boundary_p2_loop = np.stack([loop, nv + be], axis=1).ravel()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def h(self) -> float:
        p = self.vertices[self.triangles]
        lens = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2)
        return float(lens.max())

    @cached_property
    def area(self) -> float:
        return float(self.quad_weights.sum())

    def min_angle(self) -> float:
        """Smallest interior angle in degrees."""
        p = self.vertices[self.triangles]
        ang = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            c = np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            ang.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
        return float(np.min(ang))

    def boundary_polyline(self) -> np.ndarray:
        return self.nodes[self.boundary_p2_loop]

    # --- quadrature ----------------------------------------------------------
    @cached_property
    def _geom(self):
        p = self.vertices[self.triangles]
        B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # cols: e1, e2
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        Binv = np.linalg.inv(B)
        return p, B, det, Binv

    @cached_property
    def quad_points(self) -> np.ndarray:
        """(nt, 7, 2) physical quadrature points."""
        p = self.vertices[self.triangles]
        return np.einsum("qk,tkd->tqd", QUAD_BARY, p)

    @cached_property
    def quad_weights(self) -> np.ndarray:
        det = self._geom[2]
        return 0.5 * det[:, None] * QUAD_W[None, :]

    @cached_property
    def p2_values(self) -> np.ndarray:
        return p2_basis(QUAD_BARY)[0]

    @cached_property
    def p2_grads(self) -> np.ndarray:
        """(nt, 7, 6, 2) physical gradients of P2 shapes at quadrature points."""
        _, d = p2_basis(QUAD_BARY)
        # reference coords (x, y) = (L1, L2): d/dx = dL1 - dL0, d/dy = dL2 - dL0
        dref = np.stack([d[..., 1] - d[..., 0], d[..., 2] - d[..., 0]], axis=-1)
        Binv = self._geom[3]
        return np.einsum("qad,tdj->tqaj", dref, Binv)

    @cached_property
    def p1_values(self) -> np.ndarray:
        return QUAD_BARY.copy()

    @cached_property
    def p1_grads(self) -> np.ndarray:
        dref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return np.einsum("ad,tdj->taj", dref, self._geom[3])

    @cached_property
    def edge_quad(self):
        """Boundary edge quadrature: points (ne, 3, 2), weights (ne, 3),
        outward unit normals (ne, 2), P2 edge shape values (3, 3) and the
        P2 node indices (ne, 3) as (start, end, midpoint)."""
        ev = self.boundary_edge_vertices
        a, b = self.vertices[ev[:, 0]], self.vertices[ev[:, 1]]
        d = b - a
        ln = np.linalg.norm(d, axis=1)
        pts = a[:, None, :] + EDGE_T[None, :, None] * d[:, None, :]
        w = ln[:, None] * EDGE_W[None, :]
        nrm = np.stack([d[:, 1], -d[:, 0]], axis=1) / ln[:, None]
        idx = np.stack([ev[:, 0], ev[:, 1], self.n_vertices + self.boundary_edges], axis=1)
        return pts, w, nrm, edge_p2_basis(EDGE_T), idx

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Outward unit normal ``n0`` per P2 boundary node in loop order."""
        _, _, enrm, _, _ = self.edge_quad
        if self.boundary_vertex_normals is not None:
            vn = np.asarray(self.boundary_vertex_normals, dtype=float)
        else:
            vn = enrm + np.roll(enrm, 1, axis=0)
            vn /= np.linalg.norm(vn, axis=1, keepdims=True)
        return np.stack([vn, enrm], axis=1).reshape(-1, 2)

    # --- assembly ------------------------------------------------------------
    def _assemble(self, local: np.ndarray, rows_map, cols_map, shape):
        nt, a, b = local.shape
        r = np.repeat(rows_map, b, axis=1).ravel()
        c = np.tile(cols_map, (1, a)).ravel()
        return sp.csr_matrix((local.ravel(), (r, c)), shape=shape)

    def mass_matrix(self, space: str = "P2-scalar", weight=None) -> sp.csr_matrix:
        """Scalar mass matrix; ``weight`` is a (nt, 7) coefficient at quad points."""
        key = ("mass", space)
        if weight is None and key in self.cache:
            return self.cache[key]
        w = self.quad_weights if weight is None else self.quad_weights * weight
        if space == "P1-scalar":
            phi, dofs, n = self.p1_values, self.triangles, self.n_vertices
        else:
            phi, dofs, n = self.p2_values, self.tri6, self.n_nodes
        loc = np.einsum("tq,qa,qb->tab", w, phi, phi)
        M = self._assemble(loc, dofs, dofs, (n, n))
        if weight is None:
            self.cache[key] = M
        return M

    def stiffness_matrix(self, weight=None) -> sp.csr_matrix:
        """P2 scalar Laplacian stiffness ``int w grad(a).grad(b)``."""
        if weight is None and "stiff" in self.cache:
            return self.cache["stiff"]
        w = self.quad_weights if weight is None else self.quad_weights * weight
        g = self.p2_grads
        loc = np.einsum("tq,tqad,tqbd->tab", w, g, g)
        K = self._assemble(loc, self.tri6, self.tri6, (self.n_nodes,) * 2)
        if weight is None:
            self.cache["stiff"] = K
        return K

    def boundary_mass_matrix(self) -> sp.csr_matrix:
        if "bmass" in self.cache:
            return self.cache["bmass"]
        _, w, _, phi, idx = self.edge_quad
        loc = np.einsum("eq,qa,qb->eab", w, phi, phi)
        M = self._assemble(loc, idx, idx, (self.n_nodes,) * 2)
        self.cache["bmass"] = M
        return M

    def _mass_lu(self):
        if "mass_lu" not in self.cache:
            self.cache["mass_lu"] = spla.splu(self.mass_matrix().tocsc())
        return self.cache["mass_lu"]

    # --- field evaluation helpers -------------------------------------------
    def at_quad(self, nodal: np.ndarray) -> np.ndarray:
        """P2 nodal values (nn, ...) to quadrature values (nt, 7, ...)."""
        loc = nodal[self.tri6]  # (nt, 6, ...)
        return np.einsum("qa,ta...->tq...", self.p2_values, loc)

    def grad_at_quad(self, nodal: np.ndarray) -> np.ndarray:
        """Gradient at quadrature points; trailing axis is the derivative index."""
        loc = nodal[self.tri6]
        return np.einsum("tqaj,ta...->tq...j", self.p2_grads, loc)

    def p1_at_quad(self, nodal: np.ndarray) -> np.ndarray:
        return np.einsum("qa,ta...->tq...", self.p1_values, nodal[self.triangles])

    def project(self, quad_vals: np.ndarray) -> np.ndarray:
        """L2 projection of quadrature values (nt, 7, ...) onto P2 nodal values."""
        shp = quad_vals.shape[2:]
        flat = quad_vals.reshape(quad_vals.shape[:2] + (-1,))
        rhs_loc = np.einsum("tq,qa,tqk->tak", self.quad_weights, self.p2_values, flat)
        rhs = np.zeros((self.n_nodes, flat.shape[-1]))
        np.add.at(rhs, self.tri6.ravel(), rhs_loc.reshape(-1, flat.shape[-1]))
        sol = self._mass_lu().solve(rhs)
        return sol.reshape((self.n_nodes,) + shp)

    def recovered_gradient(self, nodal: np.ndarray) -> np.ndarray:
        """L2-projected gradient, (nn, ..., 2)."""
        return self.project(self.grad_at_quad(nodal))

    def recovered_laplacian(self, nodal: np.ndarray) -> np.ndarray:
        """Divergence of the recovered gradient, projected again onto P2."""
        g = self.recovered_gradient(nodal)
        gq = self.grad_at_quad(g)  # (..., 2, 2): [..., i, j] = d_j (d_i u)
        return self.project(np.trace(gq, axis1=-2, axis2=-1))

    def interpolate(self, func, space: str = "P2-scalar") -> "DiscreteField":
        """Nodal interpolant of ``func(x, y)`` returning a scalar or a tuple."""
        pts = self.vertices if space == "P1-scalar" else self.nodes
        vals = func(pts[:, 0], pts[:, 1])
        return DiscreteField.from_nodal(self, space, np.asarray(vals, dtype=float))

    def locate(self, pts: np.ndarray):
        """Containing triangle and barycentric coordinates of points.

        Points outside the mesh are assigned to the nearest candidate
        triangle with clipped coordinates.
        """
        from scipy.spatial import cKDTree

        if "centroid_tree" not in self.cache:
            cen = self.vertices[self.triangles].mean(axis=1)
            self.cache["centroid_tree"] = cKDTree(cen)
        pts = np.atleast_2d(pts)
        k = min(12, len(self.triangles))
        _, cand = self.cache["centroid_tree"].query(pts, k=k)
        cand = cand.reshape(len(pts), k)
        p0 = self.vertices[self.triangles[cand, 0]]
        Binv = self._geom[3][cand]
        ref = np.einsum("mkij,mkj->mki", Binv, pts[:, None, :] - p0)
        bary = np.concatenate([1 - ref.sum(-1, keepdims=True), ref], axis=-1)
        score = bary.min(axis=-1)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(pts))
        b = np.clip(bary[rows, best], 0, None)
        b /= b.sum(axis=1, keepdims=True)
        return cand[rows, best], b

    def evaluate_points(self, nodal: np.ndarray, pts: np.ndarray) -> np.ndarray:
        tri, bary = self.locate(pts)
        phi, _ = p2_basis(bary)
        return np.einsum("ma,ma...->m...", phi, nodal[self.tri6[tri]])


# --- meshing -------------------------------------------------------------------

def build_mesh(curve: BoundaryCurve, h_target: float, pinned=None,
               min_angle: float = 20.0) -> ReferenceMesh:
    """Quality triangulation of the interior of ``curve``.

    Parameters
    ----------
    curve : BoundaryCurve
        Simple closed curve. If arc-length normalized, the boundary is
        resampled at spacing close to ``h_target`` on the spline; otherwise
        its nodes are used as given.
    h_target : float
        Target element diameter.
    pinned : sequence of float, optional
        Spline parameters that must appear as boundary vertices.

    Raises
    ------
    MeshingFailed
        Self-intersecting boundary, too coarse a target or triangulator failure.
    """
    from .geometry import self_intersects

    if h_target <= 0:
        raise MeshingFailed("h_target must be positive")
    normals = None
    if curve.is_normalized:
        r = _boundary_params(curve.length, h_target, pinned)
        bpts = curve.evaluate(r)
        normals = frame_at(curve, r)[1]
    else:
        bpts = curve.nodes
    nb = len(bpts)
    if nb < 3:
        raise MeshingFailed("h_target too coarse for the curve")
    bc = BoundaryCurve(bpts, enforce_ccw=False)
    if not bc.orientation:
        raise MeshingFailed("boundary must be counterclockwise")
    spacing = float(np.median(bc.segment_lengths))
    if self_intersects(bc, 1e-9 * max(spacing, 1e-300) + 1e-12):
        raise MeshingFailed("boundary polyline is not simple")
    seg = np.stack([np.arange(nb), (np.arange(nb) + 1) % nb], axis=1)
    area = np.sqrt(3) / 4 * h_target ** 2
    try:
        out = triangle.triangulate({"vertices": np.array(bpts, dtype=float), "segments": seg},
                                   f"pq30a{area:.12g}Y")
    except Exception as exc:  # triangle raises bare RuntimeErrors
        raise MeshingFailed(f"triangulation failed: {exc}") from exc
    verts, tris = out["vertices"], out["triangles"]
    if len(tris) == 0 or not np.allclose(verts[:nb], bpts):
        raise MeshingFailed("triangulator altered the boundary")
    mesh = ReferenceMesh(verts, tris, np.arange(nb), normals)
    if mesh.min_angle() < min_angle:
        raise MeshingFailed(f"min angle {mesh.min_angle():.1f} deg below {min_angle}")
    return mesh


def _boundary_params(L, h, pinned):
    if not pinned:
        n = max(8, int(np.ceil(L / h)))
        return np.arange(n) * (L / n)
    pins = np.sort(np.mod(np.asarray(pinned, dtype=float), L))
    gaps = np.diff(np.append(pins, pins[0] + L))
    out = []
    for p0, g in zip(pins, gaps):
        k = max(1, int(np.ceil(g / h)))
        out.extend(p0 + g * np.arange(k) / k)
    return np.mod(np.asarray(out), L)


def save_mesh(mesh: ReferenceMesh, path) -> None:
    """JSON schema: ``{"vertices": [[x, y]...], "triangles": [[i, j, k]...],
    "boundary_loop": [i...], "boundary_vertex_normals": [[nx, ny]...] | null}``."""
    data = {
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_loop": mesh.boundary_loop.tolist(),
        "boundary_vertex_normals": None if mesh.boundary_vertex_normals is None
        else np.asarray(mesh.boundary_vertex_normals).tolist(),
    }
    Path(path).write_text(json.dumps(data))


def load_mesh(path) -> ReferenceMesh:
    d = json.loads(Path(path).read_text())
    return ReferenceMesh(np.array(d["vertices"]), np.array(d["triangles"]),
                         np.array(d["boundary_loop"]),
                         None if d.get("boundary_vertex_normals") is None
                         else np.array(d["boundary_vertex_normals"]))


# --- fields --------------------------------------------------------------------

@dataclass(eq=False)
class DiscreteField:
    """Finite-element field with blocked component dofs."""

    mesh: ReferenceMesh
    space: str
    dofs: np.ndarray

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValidationError(f"unknown space {self.space!r}")
        self.dofs = np.asarray(self.dofs, dtype=float).ravel()
        if self.dofs.size != self.n_dofs_expected():
            raise ValidationError(
                f"{self.space} field needs {self.n_dofs_expected()} dofs, got {self.dofs.size}")

    def n_dofs_expected(self) -> int:
        n = self.mesh.n_vertices if self.space == "P1-scalar" else self.mesh.n_nodes
        return n * SPACES[self.space]

    @property
    def n_components(self) -> int:
        return SPACES[self.space]

    def nodal(self) -> np.ndarray:
        """(n,) for scalar spaces, (n, k) otherwise, or (n, 2, 2) for tensors."""
        k = self.n_components
        if k == 1:
            return self.dofs.copy()
        v = self.dofs.reshape(k, -1).T.copy()
        return v.reshape(-1, 2, 2) if self.space == "P2-tensor" else v

    @classmethod
    def from_nodal(cls, mesh, space, values):
        values = np.asarray(values, dtype=float)
        if SPACES[space] == 1:
            return cls(mesh, space, values.ravel())
        if isinstance(values, np.ndarray) and values.shape[0] == SPACES[space] and values.ndim == 2 \
                and values.shape[1] != SPACES[space]:
            values = values.T  # tuple of component arrays
        flat = values.reshape(values.shape[0], -1)
        return cls(mesh, space, flat.T.ravel())

    def __add__(self, other):
        return DiscreteField(self.mesh, self.space, self.dofs + other.dofs)

    def __sub__(self, other):
        return DiscreteField(self.mesh, self.space, self.dofs - other.dofs)

    def __mul__(self, c):
        return DiscreteField(self.mesh, self.space, self.dofs * float(c))

    __rmul__ = __mul__


def grad(f: DiscreteField) -> DiscreteField:
    """L2-projected gradient: scalar -> P2-vector, vector -> P2-tensor."""
    m = f.mesh
    if f.space == "P1-scalar":
        g = np.einsum("taj,ta->tj", m.p1_grads, f.dofs[m.triangles])
        val = m.project(np.repeat(g[:, None, :], len(QUAD_W), axis=1))
        return DiscreteField.from_nodal(m, "P2-vector", val)
    if f.space == "P2-scalar":
        return DiscreteField.from_nodal(m, "P2-vector", m.recovered_gradient(f.dofs))
    if f.space == "P2-vector":
        val = m.recovered_gradient(f.nodal())  # (nn, 2, 2) as [i, j] = d_j u^i
        return DiscreteField.from_nodal(m, "P2-tensor", val.reshape(-1, 4))
    raise ValidationError("gradient of a tensor field is not supported")


# --- Neumann eigenbasis and spatial fractional norms ---------------------------

@dataclass(eq=False)
class Eigenbasis:
    """Neumann Laplacian eigenpairs on the P2 space, M-orthonormal."""

    eigenvalues: np.ndarray
    vectors: np.ndarray  # (nn, K)


def compute_eigenbasis(mesh: ReferenceMesh, n_modes: int = 200,
                       dense_limit: int = 3000) -> Eigenbasis:
    """Compute and cache the first ``n_modes`` Neumann eigenpairs."""
    key = ("eig", n_modes)
    if key in mesh.cache:
        return mesh.cache[key]
    K = mesh.stiffness_matrix()
    M = mesh.mass_matrix()
    n = mesh.n_nodes
    k = min(n_modes, n)
    if n <= dense_limit:
        lam, vec = sla.eigh(K.toarray(), M.toarray(), subset_by_index=(0, k - 1))
    else:
        lam, vec = spla.eigsh(K.tocsc(), k=k, M=M.tocsc(), sigma=-1e-3, which="LM")
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
    lam = np.maximum(lam, 0.0)
    lam[0] = 0.0
    eb = Eigenbasis(lam, vec)
    mesh.cache[key] = eb
    mesh.cache["eig_latest"] = eb
    return eb


def _eigenbasis(mesh, cfg=None) -> Eigenbasis:
    n = getattr(cfg, "n_space_modes", None)
    if n is not None and ("eig", n) in mesh.cache:
        return mesh.cache[("eig", n)]
    if "eig_latest" in mesh.cache:
        return mesh.cache["eig_latest"]
    raise EigenbasisUnavailable("call compute_eigenbasis(mesh) before spectral norms")


def _sobolev_sq_nodal(mesh, values: np.ndarray, s: float, eb: Eigenbasis) -> np.ndarray:
    """Squared H^s norms of scalar nodal columns ``values`` (nn, m)."""
    M = mesh.mass_matrix()
    Mv = M @ values
    coef = eb.vectors.T @ Mv
    total = np.einsum("nm,nm->m", values, Mv)
    resolved = np.sum(coef ** 2, axis=0)
    tail = np.maximum(total - resolved, 0.0)
    w = (1.0 + eb.eigenvalues) ** s
    # residual beyond the last mode carries the last mode's weight
    return w @ (coef ** 2) + (1.0 + eb.eigenvalues[-1]) ** s * tail


def _components(f) -> tuple[ReferenceMesh, np.ndarray]:
    if isinstance(f, DiscreteField):
        if f.space == "P1-scalar":
            m = f.mesh
            vals = np.zeros(m.n_nodes)
            vals[:m.n_vertices] = f.dofs
            e = m.edges
            vals[m.n_vertices:] = 0.5 * (f.dofs[e[:, 0]] + f.dofs[e[:, 1]])
            return m, vals[:, None]
        return f.mesh, f.dofs.reshape(f.n_components, -1).T
    raise ValidationError("expected a DiscreteField")


S_RANGE = (-1.0, 4.0)


def sobolev_norm(f: DiscreteField, s: float, cfg=None) -> float:
    """Spectral ``H^s`` norm via the Neumann eigenbasis.

    ``||f||^2 = sum_k (1 + lam_k)^s |f_k|^2`` over the computed modes; the
    L2 mass not captured by them is weighted by ``(1 + lam_K)^s`` so that
    ``s = 0`` reproduces the L2 norm exactly. Vector fields sum over
    components.

    Raises
    ------
    EigenbasisUnavailable
        If :func:`compute_eigenbasis` has not been run on the mesh.
    """
    if not S_RANGE[0] <= s <= S_RANGE[1]:
        raise ValidationError(f"s={s} outside supported range {S_RANGE}")
    mesh, cols = _components(f)
    eb = _eigenbasis(mesh, cfg)
    return float(np.sqrt(np.sum(_sobolev_sq_nodal(mesh, cols, s, eb))))


def l2_norm(f: DiscreteField) -> float:
    mesh, cols = _components(f)
    return float(np.sqrt(np.einsum("nm,nm->", cols, mesh.mass_matrix() @ cols)))


# --- time norms --------------------------------------------------------------

def _time_grid(n_samples: int, T: float):
    if n_samples < 2:
        raise TooFewSamples("need at least two time samples")
    if T <= 0:
        raise ValidationError("slab length must be positive")
    t = np.linspace(0.0, T, n_samples)
    w = np.full(n_samples, T / (n_samples - 1))
    w[[0, -1]] *= 0.5
    return t, w


def sine_coefficients(v: np.ndarray, T: float, n_modes: int) -> np.ndarray:
    """Coefficients on ``sqrt(2/T) sin((2n+1) pi t / (2T))`` along axis 0."""
    v = np.asarray(v, dtype=float)
    N = v.shape[0] - 1
    if n_modes > N:
        raise TooFewSamples(f"{n_modes} modes need more than {N} time intervals")
    t, w = _time_grid(v.shape[0], T)
    n = np.arange(n_modes)
    basis = np.sqrt(2.0 / T) * np.sin(np.outer(2 * n + 1, t) * np.pi / (2 * T))
    return np.tensordot(basis * w, v, axes=(1, 0))


def cosine_coefficients(u: np.ndarray, T: float, n_modes: int) -> np.ndarray:
    """Coefficients on ``1/sqrt(T)`` and ``sqrt(2/T) cos(n pi t / T)``."""
    u = np.asarray(u, dtype=float)
    N = u.shape[0] - 1
    if n_modes > N + 1:
        raise TooFewSamples(f"{n_modes} modes need at least {n_modes - 1} time intervals")
    t, w = _time_grid(u.shape[0], T)
    n = np.arange(n_modes)
    basis = np.sqrt(2.0 / T) * np.cos(np.outer(n, t) * np.pi / T)
    basis[0] = 1.0 / np.sqrt(T)
    if n_modes == N + 1:
        # trapezoid norm of the Nyquist cosine is doubled on the sample grid
        basis[-1] *= 0.5 if N > 0 else 1.0
    return np.tensordot(basis * w, u, axes=(1, 0))


def sine_frequencies(n_modes: int, T: float) -> np.ndarray:
    return (2 * np.arange(n_modes) + 1) * np.pi / (2 * T)


def beale_time_norm_h0(v, s: float, T: float, n_modes: int = 64) -> float:
    """``H^s_(0)(0, T)`` norm from the odd-quarter-wave sine expansion.

    ``||v||^2 = sum_n v_n^2 ((2n+1) pi / (2T))^(2s)`` with coefficients by
    trapezoid quadrature on the uniform sample grid, which is exactly
    orthogonal for ``n`` below the number of intervals.

    Raises
    ------
    TooFewSamples
        If ``n_modes`` exceeds the number of time intervals.
    """
    if s < 0:
        raise ValidationError("s must be non-negative")
    c = sine_coefficients(np.asarray(v, dtype=float), T, n_modes)
    return float(np.sqrt(np.sum(c ** 2 * sine_frequencies(n_modes, T) ** (2 * s))))


def beale_time_norm(u, s: float, T: float, n_modes: int = 64) -> float:
    """``H^s(0, T)`` norm from the cosine expansion,
    ``||u||^2 = sum_n (1 + n^2 pi^2 / T^2)^s u_n^2``."""
    if s < 0:
        raise ValidationError("s must be non-negative")
    c = cosine_coefficients(np.asarray(u, dtype=float), T, n_modes)
    n = np.arange(n_modes)
    return float(np.sqrt(np.sum((1 + (n * np.pi / T) ** 2) ** s * c ** 2)))


# --- space-time norms --------------------------------------------------------

@dataclass(frozen=True)
class BealeNormConfig:
    """Exponents and truncations for the space-time diagnostics.

    Raises
    ------
    ValidationError
        Unless ``2 < s < 5/2`` and ``1 < gamma < s - 1``.
    """

    T: float = 0.05
    s: float = 2.25
    gamma: float = 1.1
    n_time_modes: int = 64
    n_space_modes: int = 200

    def __post_init__(self):
        if not 2.0 < self.s < 2.5:
            raise ValidationError(f"s={self.s} must satisfy 2 < s < 5/2")
        if not 1.0 < self.gamma < self.s - 1.0:
            raise ValidationError(
                f"gamma={self.gamma} must satisfy 1 < gamma < s - 1 = {self.s - 1:.4g}")
        if self.T <= 0:
            raise ValidationError("T must be positive")
        if self.n_time_modes < 1 or self.n_space_modes < 1:
            raise ValidationError("mode counts must be positive")


@dataclass(eq=False)
class Trajectory:
    """Field samples on a uniform time grid ``t_k = k T / N``.

    ``dofs`` has shape (N + 1, n_dofs) in the layout of ``space``.
    """

    mesh: ReferenceMesh
    space: str
    T: float
    dofs: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=float)
        if self.dofs.ndim != 2:
            raise ValidationError("trajectory dofs must be (n_times, n_dofs)")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.dofs.shape[0])

    def at(self, k: int) -> DiscreteField:
        return DiscreteField(self.mesh, self.space, self.dofs[k])

    def columns(self) -> np.ndarray:
        """(N + 1, nn, n_components) nodal values (P1 lifted to P2)."""
        return np.stack([_components(self.at(k))[1] for k in range(self.dofs.shape[0])])


def _space_sq(mesh, cols, s, eb):
    """Squared spatial H^s per time slice for cols (Nt, nn, c)."""
    Nt, nn, c = cols.shape
    flat = cols.transpose(1, 0, 2).reshape(nn, Nt * c)
    sq = _sobolev_sq_nodal(mesh, flat, s, eb).reshape(Nt, c)
    return sq.sum(axis=1)


def _l2_time_space(mesh, cols, T, s, eb):
    _, w = _time_grid(cols.shape[0], T)
    return float(w @ _space_sq(mesh, cols, s, eb))


def _h0_time_space(mesh, cols, T, r, s_space, n_modes, eb):
    """sum_n mu_n^(2r) ||u_n||^2_{H^s_space}, u_n the sine coefficient fields."""
    N = cols.shape[0] - 1
    k = min(n_modes, N)
    coef = sine_coefficients(cols, T, k)  # (k, nn, c)
    sq = _space_sq(mesh, coef, s_space, eb)
    return float(np.sum(sine_frequencies(k, T) ** (2 * r) * sq))


def _boundary_sq(mesh, cols, sigma):
    """Squared H^sigma(boundary) per slice: Fourier series in loop arc length."""
    loop = mesh.boundary_p2_loop
    pts = mesh.nodes[loop]
    ds = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    L = ds.sum()
    s_par = np.concatenate([[0.0], np.cumsum(ds)[:-1]])
    w = 0.5 * (ds + np.roll(ds, 1))
    nb = len(loop)
    kmax = nb // 2
    k = np.arange(-kmax, kmax + 1)
    E = np.exp(-2j * np.pi * np.outer(k, s_par) / L) / np.sqrt(L)
    vals = cols[:, loop, :]  # (Nt, nb, c)
    coef = np.einsum("kb,b,tbc->tkc", E, w, vals)
    wt = (1 + (2 * np.pi * k / L) ** 2) ** sigma
    return np.einsum("k,tkc->t", wt, np.abs(coef) ** 2)


def _boundary_k_norm_sq(mesh, cols, T, sigma, n_modes):
    _, w = _time_grid(cols.shape[0], T)
    l2h = float(w @ _boundary_sq(mesh, cols, sigma))
    N = cols.shape[0] - 1
    k = min(n_modes, N)
    coef = sine_coefficients(cols, T, k)
    h0 = float(np.sum(sine_frequencies(k, T) ** sigma * _boundary_sq(mesh, coef, 0.0)))
    return l2h + h0


def composite_norm(traj: Trajectory, which: str, cfg: BealeNormConfig,
                   s: float | None = None, gamma: float | None = None) -> float:
    """Mixed space-time norm of a trajectory.

    Parameters
    ----------
    which : {"K", "Kpr", "Kbar", "A"}
        ``K``: ``L2 H^s + H^{s/2}_(0) L2``.
        ``Kpr``: gradient in ``K^{s-1}``, boundary trace in ``K^{s-1/2}``
        and ``L^inf H^1``.
        ``Kbar``: ``L2 H^s + H^{(s+1)/2}_(0) H^{-1}``.
        ``A``: ``max(sup_t t^{-1/4} ||.||_{H^s}, ||.||_{H^2_(0) H^gamma})``.
    s, gamma : float, optional
        Override the exponents of ``cfg`` (shifted orders such as ``s + 1``).
    """
    s = cfg.s if s is None else s
    gamma = cfg.gamma if gamma is None else gamma
    mesh = traj.mesh
    cols = traj.columns()
    if not np.any(cols):
        return 0.0
    eb = _eigenbasis(mesh, cfg)
    T = traj.T
    nm = cfg.n_time_modes
    if which == "K":
        return float(np.sqrt(_l2_time_space(mesh, cols, T, s, eb)
                             + _h0_time_space(mesh, cols, T, s / 2, 0.0, nm, eb)))
    if which == "Kbar":
        return float(np.sqrt(_l2_time_space(mesh, cols, T, s, eb)
                             + _h0_time_space(mesh, cols, T, (s + 1) / 2, -1.0, nm, eb)))
    if which == "A":
        sq = _space_sq(mesh, cols, s, eb)
        t = traj.times
        sup = float(np.max(np.sqrt(sq[1:]) * t[1:] ** -0.25)) if len(t) > 1 else 0.0
        h2 = np.sqrt(_h0_time_space(mesh, cols, T, 2.0, gamma, nm, eb))
        return max(sup, float(h2))
    if which == "Kpr":
        if cols.shape[2] != 1:
            raise ValidationError("Kpr applies to scalar pressure trajectories")
        g = np.stack([mesh.recovered_gradient(cols[k, :, 0]) for k in range(cols.shape[0])])
        grad_sq = _l2_time_space(mesh, g, T, s - 1, eb) \
            + _h0_time_space(mesh, g, T, (s - 1) / 2, 0.0, nm, eb)
        bnd_sq = _boundary_k_norm_sq(mesh, cols, T, s - 0.5, nm)
        h1 = np.sqrt(_space_sq(mesh, cols, 1.0, eb)).max()
        return float(np.sqrt(grad_sq + bnd_sq + h1 ** 2))
    raise ValidationError(f"unknown norm tag {which!r}")


# --- field snapshot I/O -------------------------------------------------------

def save_field(f: DiscreteField, path, time: float | None = None) -> None:
    """Write ``<path>.bin`` (float64 little endian) and ``<path>.json`` header."""
    path = Path(path)
    f.dofs.astype("<f8").tofile(path.with_suffix(".bin"))
    header = {"space": f.space, "n_dofs": int(f.dofs.size), "time": time,
              "dtype": "float64-le"}
    path.with_suffix(".json").write_text(json.dumps(header))


def load_field(mesh: ReferenceMesh, path) -> tuple[DiscreteField, float | None]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    dofs = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if dofs.size != header["n_dofs"]:
        raise ValidationError(f"{path}: header says {header['n_dofs']} dofs, file has {dofs.size}")
    return DiscreteField(mesh, header["space"], dofs), header.get("time")


def save_trajectory(traj: Trajectory, path) -> None:
    """Write a whole trajectory as one ``.bin`` block with a ``.json`` header."""
    path = Path(path)
    traj.dofs.astype("<f8").tofile(path.with_suffix(".bin"))
    header = {"space": traj.space, "T": float(traj.T), "n_times": int(traj.dofs.shape[0]),
              "n_dofs": int(traj.dofs.shape[1]), "dtype": "float64-le"}
    path.with_suffix(".json").write_text(json.dumps(header))


def load_trajectory(mesh: ReferenceMesh, path) -> Trajectory:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    dofs = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    shape = (header["n_times"], header["n_dofs"])
    if dofs.size != shape[0] * shape[1]:
        raise ValidationError(f"{path}: expected {shape[0] * shape[1]} values, file has {dofs.size}")
    return Trajectory(mesh, header["space"], header["T"], dofs.reshape(shape))
