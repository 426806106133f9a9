"""Unsteady Stokes-type solver on the fixed reference domain.

Solves, for ``w(0) = 0``,

    d_t w - Q2 Lap w + J^T grad q = f,
    Tr(grad w J) = g,
    [-q I + (grad w J) + (grad w J)^T] J^{-1} n0 = h   on the boundary,

with Taylor-Hood elements (P2 velocity, P1 pressure) and implicit Euler.
``J`` and ``Q2`` are the Jacobian field and conformal factor of a
:class:`~splashmhd.conformal.ConformalMap`, sampled at quadrature points.

Dividing the momentum equation by ``Q2`` turns the system into the
pullback of the physical Stokes problem, whose symmetric weak form uses
``2 sym(grad w J) : sym(grad phi J) / Q2``. That form carries the extra
term ``-J^T grad g``; it is absorbed by solving for ``q + g`` with
traction ``h - g J^{-1} n0`` and subtracting ``g`` afterwards.

Data live at quadrature points: ``f`` at triangle points (nt, 7, 2),
``g`` at triangle points (nt, 7), ``h`` at boundary edge points (ne, 3, 2).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conformal import ConformalMap, jacobian_at, jacobian_inverse_at, q_squared_at
from .errors import DataTraceViolation, LinearSolveFailed, SingularSystem, ValidationError
from .mesh_fields import EDGE_T, DiscreteField, ReferenceMesh, Trajectory, p2_basis

TRACE_TOL = 1e-6
RESIDUAL_TOL = 1e-10


# --- data ------------------------------------------------------------------------

@dataclass(eq=False)
class LinearStokesData:
    """Right-hand sides on a uniform time grid ``t_k = k T / n_steps``.

    Attributes
    ----------
    f : (n_steps + 1, nt, 7, 2)
    g : (n_steps + 1, nt, 7)
    h : (n_steps + 1, ne, 3, 2)
    """

    mesh: ReferenceMesh
    T_slab: float
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if self.T_slab <= 0:
            raise ValidationError("T_slab must be positive")
        nt = len(self.mesh.triangles)
        ne = len(self.mesh.boundary_edges)
        n = self.f.shape[0]
        if n < 2:
            raise ValidationError("need at least one time step")
        want = {"f": (n, nt, 7, 2), "g": (n, nt, 7), "h": (n, ne, 3, 2)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_steps(self) -> int:
        return self.f.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.T_slab / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T_slab, self.n_steps + 1)

    @classmethod
    def zeros(cls, mesh: ReferenceMesh, T: float, n_steps: int) -> "LinearStokesData":
        nt, ne = len(mesh.triangles), len(mesh.boundary_edges)
        n = n_steps + 1
        return cls(mesh, T, np.zeros((n, nt, 7, 2)), np.zeros((n, nt, 7)), np.zeros((n, ne, 3, 2)))

    @classmethod
    def from_callables(cls, mesh: ReferenceMesh, T: float, n_steps: int,
                       f=None, g=None, h=None) -> "LinearStokesData":
        """Sample ``f(t, pts)``, ``g(t, pts)`` and ``h(t, pts, normals)``.

        ``pts`` has shape (..., 2); ``normals`` are the outward unit normals
        of the boundary edges broadcast to the edge quadrature points.
        """
        d = cls.zeros(mesh, T, n_steps)
        xq = mesh.quad_points
        ep, _, en, _, _ = mesh.edge_quad
        en_q = np.broadcast_to(en[:, None, :], ep.shape)
        for k, t in enumerate(d.times):
            if f is not None:
                d.f[k] = f(t, xq)
            if g is not None:
                d.g[k] = g(t, xq)
            if h is not None:
                d.h[k] = h(t, ep, en_q)
        return d

    def _combine(self, other, op):
        if other.mesh is not self.mesh or other.f.shape != self.f.shape:
            raise ValidationError("data sets live on different meshes or grids")
        return LinearStokesData(self.mesh, self.T_slab, op(self.f, other.f),
                                op(self.g, other.g), op(self.h, other.h))

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def scaled(self, c: float) -> "LinearStokesData":
        return LinearStokesData(self.mesh, self.T_slab, c * self.f, c * self.g, c * self.h)

    def trace_defects(self) -> dict:
        """Max-norm sizes of ``f(0)``, ``g(0)``, ``h(0)`` and ``d_t g(0)``.

        ``d_t g(0)`` uses the second-order one-sided difference, exact for
        quadratics in time; ``dg0_allowance`` is the size of its truncation
        term estimated from the third difference.
        """
        g = self.g.reshape(self.g.shape[0], -1)
        dt = self.dt
        out = {"f0": float(np.abs(self.f[0]).max()),
               "g0": float(np.abs(g[0]).max()),
               "h0": float(np.abs(self.h[0]).max())}
        if self.n_steps >= 2:
            dg = (-3 * g[0] + 4 * g[1] - g[2]) / (2 * dt)
            out["dg0"] = float(np.abs(dg).max())
        else:
            out["dg0"] = float(np.abs((g[1] - g[0]) / dt).max())
        if self.n_steps >= 3:
            out["dg0_allowance"] = float(np.abs(g[3] - 3 * g[2] + 3 * g[1] - g[0]).max() / dt)
        else:
            out["dg0_allowance"] = 0.0
        return out

    def remove_initial_traces(self) -> "LinearStokesData":
        """Copy with ``f(0)``, ``g(0)``, ``h(0)`` and ``d_t g(0)`` subtracted.

        ``d_t g(0)`` is the one-sided estimate of :meth:`trace_defects`, so
        the result passes :meth:`check_traces` up to round-off.
        """
        g = self.g - self.g[0]
        if self.n_steps >= 2:
            dg = (4 * g[1] - g[2]) / (2 * self.dt)
            g = g - self.times[:, None, None] * dg[None]
        return LinearStokesData(self.mesh, self.T_slab, self.f - self.f[0], g, self.h - self.h[0])

    def check_traces(self, tol: float = TRACE_TOL, scale: float = 1.0) -> None:
        """Raise :class:`DataTraceViolation` unless the data vanish at ``t = 0``."""
        d = self.trace_defects()
        lim = tol * max(1.0, scale)
        bad = [k for k in ("f0", "g0", "h0") if d[k] > lim]
        if d["dg0"] > lim + d["dg0_allowance"]:
            bad.append("dg0")
        if bad:
            detail = ", ".join(f"{k}={d[k]:.3g}" for k in bad)
            raise DataTraceViolation(f"data do not vanish at t=0 (limit {lim:.1e}): {detail}")


# --- operator ----------------------------------------------------------------------

@dataclass(eq=False)
class StokesSystem:
    """Assembled blocks and the factorized implicit-Euler saddle matrix.

    Velocity unknowns are ordered component by component
    ``[w1 (nn), w2 (nn)]``; pressure unknowns are P1 vertex values.
    """

    mesh: ReferenceMesh
    cmap: ConformalMap
    dt: float
    M: sp.csr_matrix          # velocity mass, weight 1/Q2
    A: sp.csr_matrix          # symmetric-gradient form
    B: sp.csr_matrix          # (nv, 2 nn) divergence form
    Mp: sp.csr_matrix         # P1 mass, weight 1/Q2
    K: sp.csc_matrix          # saddle matrix
    lu: object = field(repr=False)
    Jq: np.ndarray = field(repr=False)        # (nt, 7, 2, 2)
    Q2q: np.ndarray = field(repr=False)       # (nt, 7)
    Jinv_edge: np.ndarray = field(repr=False)  # (ne, 3, 2, 2)

    @property
    def n_velocity(self) -> int:
        return 2 * self.mesh.n_nodes

    @property
    def n_pressure(self) -> int:
        return self.mesh.n_vertices

    def momentum_block(self) -> sp.csr_matrix:
        return (self.M / self.dt + self.A).tocsr()


def _vel_index(mesh: ReferenceMesh):
    nn = mesh.n_nodes
    return np.concatenate([mesh.tri6, mesh.tri6 + nn], axis=1)  # (nt, 12)


def assemble_operator(mesh: ReferenceMesh, cmap: ConformalMap, dt: float) -> StokesSystem:
    """Assemble and factorize ``[[M/dt + A, -B^T], [-B, 0]]``.

    Raises
    ------
    SingularSystem
        If the factorization fails or the pressure block has a kernel.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    xq = mesh.quad_points
    Jq = jacobian_at(cmap, xq)
    Q2q = q_squared_at(cmap, xq)
    wq = mesh.quad_weights / Q2q
    # physical gradients J^T grad N_a
    gphys = np.einsum("tqji,tqaj->tqai", Jq, mesh.p2_grads)   # (nt, 7, 6, 2)
    nt = len(mesh.triangles)
    N = mesh.p2_values
    mloc = np.einsum("tq,qa,qb->tab", wq, N, N)
    gg = np.einsum("tq,tqai,tqbi->tab", wq, gphys, gphys)
    # cross term g_a^j g_b^i for (a, i), (b, j)
    cross = np.einsum("tq,tqaj,tqbi->taibj", wq, gphys, gphys)
    Aloc = cross.copy()
    for i in range(2):
        Aloc[:, :, i, :, i] += gg
    # reorder to (component, node) blocks matching _vel_index
    Aloc = np.transpose(Aloc, (0, 2, 1, 4, 3)).reshape(nt, 12, 12)
    Mloc = np.zeros((nt, 12, 12))
    Mloc[:, :6, :6] = mloc
    Mloc[:, 6:, 6:] = mloc
    Bloc = np.einsum("tq,qc,tqai->tcia", wq, mesh.p1_values, gphys).reshape(nt, 3, 12)
    vi = _vel_index(mesh)
    nv2 = 2 * mesh.n_nodes
    nvx = mesh.n_vertices
    A = mesh._assemble(Aloc, vi, vi, (nv2, nv2))
    M = mesh._assemble(Mloc, vi, vi, (nv2, nv2))
    B = mesh._assemble(Bloc, mesh.triangles, vi, (nvx, nv2))
    Mp = mesh.mass_matrix("P1-scalar", 1.0 / Q2q)
    K = sp.bmat([[M / dt + A, -B.T], [-B, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SingularSystem(f"saddle matrix factorization failed: {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(diag)) or diag.min() <= 1e-14 * diag.max():
        raise SingularSystem(
            f"saddle matrix numerically singular (pivot ratio {diag.min() / diag.max():.2e});"
            " check the inf-sup pairing and the boundary conditions")
    ep = mesh.edge_quad[0]
    Jinv_edge = jacobian_inverse_at(cmap, ep)
    return StokesSystem(mesh, cmap, dt, M.tocsr(), A.tocsr(), B.tocsr(), Mp.tocsr(), K, lu,
                        Jq, Q2q, Jinv_edge)


def pressure_nullspace_dimension(sys: StokesSystem, rel_tol: float = 1e-9,
                                 dense_limit: int = 2500) -> int:
    """Dimension of ``ker B^T`` (pressures invisible to every velocity).

    The momentum block is positive definite, so this is the kernel of the
    whole saddle matrix. Small systems use a dense SVD; larger ones only
    test the constant pressure.
    """
    Bt = sys.B.T.tocsc()
    scale = spla.norm(Bt)
    if sys.n_pressure <= dense_limit:
        s = sla.svdvals(Bt.toarray())
        return int(np.sum(s <= rel_tol * scale))
    one = np.ones(sys.n_pressure) / np.sqrt(sys.n_pressure)
    return int(np.linalg.norm(Bt @ one) <= rel_tol * scale)


# --- solving -------------------------------------------------------------------------

@dataclass(eq=False)
class StokesSolution:
    """Nodal velocity (n_steps + 1, nn, 2) and P1 pressure (n_steps + 1, nv)."""

    mesh: ReferenceMesh
    T_slab: float
    w: np.ndarray
    q: np.ndarray
    residuals: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.w.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.T_slab / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T_slab, self.n_steps + 1)

    def velocity(self, k: int) -> DiscreteField:
        return DiscreteField.from_nodal(self.mesh, "P2-vector", self.w[k])

    def pressure(self, k: int) -> DiscreteField:
        return DiscreteField(self.mesh, "P1-scalar", self.q[k])

    def velocity_trajectory(self) -> Trajectory:
        return Trajectory(self.mesh, "P2-vector", self.T_slab,
                          np.transpose(self.w, (0, 2, 1)).reshape(self.w.shape[0], -1))

    def pressure_trajectory(self) -> Trajectory:
        return Trajectory(self.mesh, "P1-scalar", self.T_slab, self.q)


def _p1_projection(sys: StokesSystem, quad_vals: np.ndarray) -> np.ndarray:
    mesh = sys.mesh
    lu = mesh.cache.get("p1_lu")
    if lu is None:
        lu = spla.splu(mesh.mass_matrix("P1-scalar").tocsc())
        mesh.cache["p1_lu"] = lu
    loc = np.einsum("tq,qc,tq->tc", mesh.quad_weights, mesh.p1_values, quad_vals)
    rhs = np.zeros(mesh.n_vertices)
    np.add.at(rhs, mesh.triangles.ravel(), loc.ravel())
    return lu.solve(rhs)


def _load_vectors(sys: StokesSystem, f, g, h):
    """Momentum load (2 nn,), constraint load (nv,) and the pressure shift."""
    mesh = sys.mesh
    nn = mesh.n_nodes
    wq = mesh.quad_weights / sys.Q2q
    F = np.zeros(2 * nn)
    loc = np.einsum("tq,qa,tqi->tia", wq, mesh.p2_values, f)
    vi = _vel_index(mesh)
    np.add.at(F, vi.ravel(), loc.reshape(len(mesh.triangles), 12).ravel())
    g_shift = np.zeros(mesh.n_vertices)
    if np.any(g):
        g_nodal = mesh.project(g)
        g_shift = _p1_projection(sys, g)
    ep, ew, en, ephi, eidx = mesh.edge_quad
    hb = h
    if np.any(g):
        g_edge = np.einsum("qa,ea->eq", ephi, g_nodal[eidx])
        m = np.einsum("eqij,ej->eqi", sys.Jinv_edge, en)
        hb = h - g_edge[..., None] * m
    bloc = np.einsum("eq,qa,eqi->eia", ew, ephi, hb)
    np.add.at(F, eidx.ravel(), bloc[:, 0, :].ravel())
    np.add.at(F, (eidx + nn).ravel(), bloc[:, 1, :].ravel())
    G = np.zeros(mesh.n_vertices)
    gl = np.einsum("tq,qc,tq->tc", wq, mesh.p1_values, g)
    np.add.at(G, mesh.triangles.ravel(), gl.ravel())
    return F, G, g_shift


def solve_slab(sys: StokesSystem, data: LinearStokesData, check_traces: bool = True,
               trace_tol: float = TRACE_TOL, residual_tol: float = RESIDUAL_TOL) -> StokesSolution:
    """March the slab with implicit Euler from ``w(0) = 0``.

    Raises
    ------
    DataTraceViolation
        When ``check_traces`` and the data do not vanish at ``t = 0``.
    LinearSolveFailed
        If a step's relative algebraic residual stays above ``residual_tol``.
    """
    if data.mesh is not sys.mesh:
        raise ValidationError("data and operator use different meshes")
    if abs(data.dt - sys.dt) > 1e-12 * sys.dt:
        raise ValidationError(f"data step {data.dt:.6g} differs from operator step {sys.dt:.6g}")
    if check_traces:
        scale = float(np.ptp(sys.mesh.vertices, axis=0).max())
        data.check_traces(trace_tol, scale)
    mesh = sys.mesh
    nn, nv = mesh.n_nodes, mesh.n_vertices
    n = data.n_steps
    W = np.zeros((n + 1, 2 * nn))
    Q = np.zeros((n + 1, nv))
    res = np.zeros(n + 1)
    Mdt = sys.M / sys.dt
    for k in range(1, n + 1):
        F, G, g_shift = _load_vectors(sys, data.f[k], data.g[k], data.h[k])
        rhs = np.concatenate([Mdt @ W[k - 1] + F, -G])
        x = sys.lu.solve(rhs)
        r = rhs - sys.K @ x
        nr = np.linalg.norm(rhs)
        rel = np.linalg.norm(r) / nr if nr > 0 else np.linalg.norm(r)
        if rel > residual_tol:
            x = x + sys.lu.solve(r)
            r = rhs - sys.K @ x
            rel = np.linalg.norm(r) / nr if nr > 0 else np.linalg.norm(r)
        if not np.isfinite(rel) or rel > residual_tol:
            raise LinearSolveFailed(f"step {k}: relative residual {rel:.2e} > {residual_tol:.0e}")
        res[k] = rel
        W[k] = x[:2 * nn]
        Q[k] = x[2 * nn:] - g_shift
    w = np.stack([W[:, :nn], W[:, nn:]], axis=-1)
    return StokesSolution(mesh, data.T_slab, w, Q, res)


# --- forward operator ---------------------------------------------------------------

def _edge_traces(mesh: ReferenceMesh):
    """Owning triangle and barycentric coordinates of boundary edge points."""
    if "edge_owner" in mesh.cache:
        return mesh.cache["edge_owner"]
    ev = mesh.boundary_edge_vertices
    tri = mesh.triangles
    owner = {}
    for t, (a, b, c) in enumerate(tri):
        for u, v in ((a, b), (b, c), (c, a)):
            owner[(int(u), int(v))] = t
    tids = np.array([owner.get((int(a), int(b)), owner.get((int(b), int(a)), -1)) for a, b in ev])
    ep = mesh.edge_quad[0]
    p = mesh.vertices[tri[tids]]
    Binv = mesh._geom[3][tids]
    ref = np.einsum("eij,eqj->eqi", Binv, ep - p[:, None, 0])
    bary = np.concatenate([1 - ref.sum(-1, keepdims=True), ref], axis=-1)
    mesh.cache["edge_owner"] = (tids, bary)
    return tids, bary


def boundary_gradient(mesh: ReferenceMesh, nodal: np.ndarray) -> np.ndarray:
    """Gradient of a P2 field at boundary edge quadrature points (ne, 3, ..., 2)."""
    tids, bary = _edge_traces(mesh)
    _, d = p2_basis(bary.reshape(-1, 3))
    d = d.reshape(bary.shape[:2] + d.shape[1:])  # (ne, 3, 6, 3)
    dref = np.stack([d[..., 1] - d[..., 0], d[..., 2] - d[..., 0]], axis=-1)
    grads = np.einsum("eqad,edj->eqaj", dref, mesh._geom[3][tids])
    loc = nodal[mesh.tri6[tids]]
    return np.einsum("eqaj,ea...->eq...j", grads, loc)


def boundary_values(mesh: ReferenceMesh, nodal: np.ndarray, space: str = "P2") -> np.ndarray:
    """Values of a P2 field (or a scalar P1 field) at boundary edge quadrature points."""
    _, _, _, ephi, eidx = mesh.edge_quad
    if space == "P1":
        vals = nodal[mesh.boundary_edge_vertices]
        return (1 - EDGE_T)[None] * vals[:, :1] + EDGE_T[None] * vals[:, 1:2]
    return np.einsum("qa,ea...->eq...", ephi, nodal[eidx])


def traction(mesh: ReferenceMesh, cmap: ConformalMap, w_nodal: np.ndarray,
             q_p1: np.ndarray) -> np.ndarray:
    """``[-q I + 2 sym(grad w J)] J^{-1} n0`` at boundary edge points (ne, 3, 2)."""
    ep, _, en, _, _ = mesh.edge_quad
    Je = jacobian_at(cmap, ep)
    Jie = jacobian_inverse_at(cmap, ep)
    gw = boundary_gradient(mesh, w_nodal) @ Je
    S = gw + np.swapaxes(gw, -1, -2)
    qe = boundary_values(mesh, q_p1, "P1")
    S = S - qe[..., None, None] * np.eye(2)
    m = np.einsum("eqij,ej->eqi", Jie, en)
    return np.einsum("eqij,eqj->eqi", S, m)


def apply_operator(sol: StokesSolution, cmap: ConformalMap,
                   sys: StokesSystem | None = None) -> LinearStokesData:
    """Forward operator: data reproduced from a discrete solution.

    ``g`` and ``h`` are evaluated pointwise from the fields; ``f`` is the
    weighted-L2 representative of the discrete momentum residual, so that
    ``apply_operator(solve_slab(d))`` returns ``d`` up to discretization
    error.
    """
    mesh = sol.mesh
    if sol.n_steps < 1:
        raise ValidationError("need at least two time levels")
    sys = sys or assemble_operator(mesh, cmap, sol.dt)
    nn = mesh.n_nodes
    out = LinearStokesData.zeros(mesh, sol.T_slab, sol.n_steps)
    key = ("wmass2_lu", id(sys))
    lu = mesh.cache.get(key)
    if lu is None:
        lu = spla.splu(mesh.mass_matrix("P2-scalar", 1.0 / sys.Q2q).tocsc())
        mesh.cache[key] = lu
    _, ew, _, ephi, eidx = mesh.edge_quad
    for k in range(1, sol.n_steps + 1):
        w = sol.w[k]
        gw = mesh.grad_at_quad(w) @ sys.Jq
        g = np.trace(gw, axis1=-2, axis2=-1)
        h = traction(mesh, cmap, w, sol.q[k])
        W = np.concatenate([w[:, 0], w[:, 1]])
        Wp = np.concatenate([sol.w[k - 1][:, 0], sol.w[k - 1][:, 1]])
        # residual with the same shifted pressure the solver uses
        zero_f = np.zeros(mesh.quad_points.shape)
        Fh, _, g_shift = _load_vectors(sys, zero_f, g, h)
        R = sys.M @ (W - Wp) / sys.dt + sys.A @ W - sys.B.T @ (sol.q[k] + g_shift) - Fh
        fn = lu.solve(np.stack([R[:nn], R[nn:]], axis=1))
        out.f[k] = mesh.at_quad(fn)
        out.g[k] = g
        out.h[k] = h
    return out


def data_norms(d: LinearStokesData) -> dict:
    """Discrete L2(0,T; L2) sizes of the three data components."""
    mesh = d.mesh
    dt = d.dt
    wt = np.full(d.n_steps + 1, dt)
    wt[[0, -1]] *= 0.5
    ew = mesh.edge_quad[1]
    fq = np.einsum("k,tq,ktqi->", wt, mesh.quad_weights, d.f ** 2)
    gq = np.einsum("k,tq,ktq->", wt, mesh.quad_weights, d.g ** 2)
    hq = np.einsum("k,eq,keqi->", wt, ew, d.h ** 2)
    return {"f": float(np.sqrt(fq)), "g": float(np.sqrt(gq)), "h": float(np.sqrt(hq))}


def round_trip_error(d: LinearStokesData, d2: LinearStokesData) -> float:
    """Relative discrepancy ``|d - d2| / |d|`` summed over components."""
    a = data_norms(d - d2)
    b = data_norms(d)
    return (a["f"] + a["g"] + a["h"]) / max(b["f"] + b["g"] + b["h"], 1e-300)


# --- manufactured problems -------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedFields:
    """Smooth spatial profiles ``U``, ``P`` with derivatives, all callables of (..., 2).

    ``grad_U(x)[..., i, j] = d_j U^i``; ``lap_U`` is componentwise.
    """

    U: object
    grad_U: object
    lap_U: object
    P: object
    grad_P: object


def default_manufactured() -> ManufacturedFields:
    """``U = (sin x cos y, x y^2)``, ``P = cos(x + y)``."""
    def U(x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack([np.sin(X) * np.cos(Y), X * Y ** 2], -1)

    def gU(x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack([np.stack([np.cos(X) * np.cos(Y), -np.sin(X) * np.sin(Y)], -1),
                         np.stack([Y ** 2, 2 * X * Y], -1)], -2)

    def lU(x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack([-2 * np.sin(X) * np.cos(Y), 2 * X], -1)

    def P(x):
        return np.cos(x[..., 0] + x[..., 1])

    def gP(x):
        s = -np.sin(x[..., 0] + x[..., 1])
        return np.stack([s, s], -1)

    return ManufacturedFields(U, gU, lU, P, gP)


def manufactured_problem(mesh: ReferenceMesh, cmap: ConformalMap, T: float, n_steps: int,
                         fields: ManufacturedFields | None = None, power: int = 2):
    """Data for the exact solution ``w = t^p U``, ``q = t^p P``.

    Returns the data and a pair of callables ``(w(t, x), grad_w(t, x))``.
    With ``power >= 2`` all initial traces vanish.
    """
    mf = fields or default_manufactured()
    p = power

    def f(t, x):
        J = jacobian_at(cmap, x)
        Q2 = q_squared_at(cmap, x)
        dt_term = p * t ** (p - 1) * mf.U(x) if p > 0 else 0.0
        return dt_term + t ** p * (-Q2[..., None] * mf.lap_U(x)
                                   + np.einsum("...ji,...j->...i", J, mf.grad_P(x)))

    def g(t, x):
        J = jacobian_at(cmap, x)
        return t ** p * np.trace(mf.grad_U(x) @ J, axis1=-2, axis2=-1)

    def h(t, x, nrm):
        J = jacobian_at(cmap, x)
        Ji = jacobian_inverse_at(cmap, x)
        A = mf.grad_U(x) @ J
        S = A + np.swapaxes(A, -1, -2) - mf.P(x)[..., None, None] * np.eye(2)
        return t ** p * np.einsum("...ij,...jk,...k->...i", S, Ji, nrm)

    data = LinearStokesData.from_callables(mesh, T, n_steps, f, g, h)
    w_exact = lambda t, x: t ** p * mf.U(x)
    gw_exact = lambda t, x: t ** p * mf.grad_U(x)
    q_exact = lambda t, x: t ** p * mf.P(x)
    return data, (w_exact, gw_exact, q_exact)


def l2h1_error(sol: StokesSolution, w_exact, grad_w_exact) -> float:
    """Discrete ``L2(0,T; H1)`` error of the velocity (trapezoid in time)."""
    mesh = sol.mesh
    xq = mesh.quad_points
    wt = np.full(sol.n_steps + 1, sol.dt)
    wt[[0, -1]] *= 0.5
    tot = 0.0
    for k, t in enumerate(sol.times):
        ev = mesh.at_quad(sol.w[k]) - w_exact(t, xq)
        eg = mesh.grad_at_quad(sol.w[k]) - grad_w_exact(t, xq)
        tot += wt[k] * float(np.sum(mesh.quad_weights[..., None] * ev ** 2)
                             + np.sum(mesh.quad_weights[..., None, None] * eg ** 2))
    return float(np.sqrt(tot))


def kinetic_energy(sys: StokesSystem, w_nodal: np.ndarray) -> float:
    """``0.5 int |w|^2 / Q2`` (physical kinetic energy of the pulled-back field)."""
    W = np.concatenate([w_nodal[:, 0], w_nodal[:, 1]])
    return 0.5 * float(W @ (sys.M @ W))
