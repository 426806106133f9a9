"""Fixed-point iteration for the Lagrangian MHD system on one time slab.

Unknowns live on the fixed reference mesh: the flux ``X`` (positions of
fluid labels in the tilde plane), the velocity ``v = w + phi``, the
pressure ``q = q_w + q_phi`` and the magnetic field ``G``. Each sweep

1. freezes iteration ``n`` and collects every nonlinear term into Stokes
   data for ``(w, q_w)`` at iteration ``n + 1``,
2. integrates ``d_t G = grad v zeta J(X) G`` and ``d_t X = J(X) v`` with
   all coefficients taken from iteration ``n`` (trapezoid rule).

``phi = v0 + t phi_hat`` and ``q_phi`` absorb the initial traces so that
the Stokes data vanish at ``t = 0``. The data split into a nonlinear group
and a reference group that depends on the initial data only; the former
satisfies the zero-trace conditions exactly, the latter only up to the
discrete compatibility defect of the initial data, which is reported.

Nodal arrays use the P2 nodes of the mesh; ``(..., i, j)`` gradients mean
``d_j F^i``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .conformal import (LAMBDA, ConformalMap, as_complex, as_real, jacobian_at,
                        jacobian_grad_at, jacobian_inverse_at, q_squared_at)
from .errors import FluxDegenerate, NoConvergence, ValidationError
from .initdata import InitialData, build_phi_qphi, stream_laplacian, weighted_projection
from .mesh_fields import (BealeNormConfig, DiscreteField, ReferenceMesh, Trajectory,
                          composite_norm, compute_eigenbasis, load_mesh, load_trajectory,
                          save_mesh, save_trajectory)
from .stokes_solver import (LinearStokesData, StokesSystem, assemble_operator,
                            boundary_gradient, boundary_values, solve_slab)

log = logging.getLogger(__name__)

DET_FLOOR = 1e-6


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class PicardConfig:
    """Slab, stopping rule and diagnostics of one Picard run.

    ``tol`` is relative: a diff passes when it is below
    ``tol * max(1, size)`` with ``size`` the norm of the new iterate.
    ``norm="beale"`` measures diffs in the space-time norms of
    ``norms``; ``"l2h1"`` uses plain ``L2(0,T; H1)`` norms.
    """

    T: float = 0.05
    n_steps: int = 10
    tol: float = 1e-8
    max_iter: int = 15
    max_halvings: int = 4
    det_floor: float = DET_FLOOR
    norm: str = "beale"
    norms: BealeNormConfig = field(default_factory=BealeNormConfig)
    ball_steps: int = 16
    compute_ball: bool = True
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 3:
            raise ValidationError("slab needs T > 0 and at least 3 steps")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValidationError("tol must be positive and max_iter >= 1")
        if self.norm not in ("beale", "l2h1"):
            raise ValidationError(f"unknown norm mode {self.norm!r}")
        if self.det_floor <= 0:
            raise ValidationError("det_floor must be positive")


# --- reference profiles --------------------------------------------------------------

def _p1_to_p2(mesh: ReferenceMesh, q: np.ndarray) -> np.ndarray:
    """Lift P1 vertex values (..., nv) to P2 nodal values (..., nn)."""
    e = mesh.edges
    mid = 0.5 * (q[..., e[:, 0]] + q[..., e[:, 1]])
    return np.concatenate([q, mid], axis=-1)


def _matvec(A, x):
    return np.einsum("...ij,...j->...i", A, x)


@dataclass(eq=False)
class ReferenceProfiles:
    """Quantities fixed by the initial data (computed once per scenario).

    ``phi(t) = v0 + t phi_hat``, ``Xhat = omega + t J v0`` and
    ``Ghat = G0 + t grad v0 J G0`` (nodal).
    """

    mesh: ReferenceMesh
    cmap: ConformalMap
    v0: np.ndarray        # (nn, 2)
    G0: np.ndarray        # (nn, 2)
    phi_hat: np.ndarray   # (nn, 2)
    q_phi: np.ndarray     # (nn,)  P2 nodal
    grad_v0: np.ndarray   # (nn, 2, 2) recovered
    info: object = None
    lap_v0: np.ndarray | None = None   # (nt, 7, 2) Laplacian of v0 at quad points, if known

    @property
    def omega(self) -> np.ndarray:
        return self.mesh.nodes

    @property
    def J_nodes(self) -> np.ndarray:
        return jacobian_at(self.cmap, self.mesh.nodes)

    @property
    def Jv0(self) -> np.ndarray:
        return _matvec(self.J_nodes, self.v0)

    def phi(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        return self.v0[None] + t[:, None, None] * self.phi_hat[None]

    def Xhat(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        return self.omega[None] + t[:, None, None] * self.Jv0[None]

    def Ghat(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        rate = _matvec(self.grad_v0 @ self.J_nodes, self.G0)
        return self.G0[None] + t[:, None, None] * rate[None]

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.v0) or np.any(self.G0))


def reference_from_nodal(mesh: ReferenceMesh, cmap: ConformalMap, v0: np.ndarray,
                         G0: np.ndarray, lap_v0: np.ndarray | None = None) -> ReferenceProfiles:
    """``phi``, ``q_phi`` and the fixed gradients from nodal reference-domain fields.

    ``lap_v0`` is an optional accurate Laplacian of ``v0`` at quad points;
    without it the recovered Laplacian is used.
    """
    v0 = np.asarray(v0, dtype=float)
    G0 = np.asarray(G0, dtype=float)
    if not (np.any(v0) or np.any(G0)):
        z = np.zeros_like(v0)
        return ReferenceProfiles(mesh, cmap, v0, G0, z, np.zeros(mesh.n_nodes),
                                 np.zeros((mesh.n_nodes, 2, 2)))
    phi, q_phi, info = build_phi_qphi(DiscreteField.from_nodal(mesh, "P2-vector", v0),
                                      DiscreteField.from_nodal(mesh, "P2-vector", G0), cmap, mesh,
                                      lap_v0=lap_v0)
    return ReferenceProfiles(mesh, cmap, v0, G0, phi.phi_hat, q_phi.dofs,
                             mesh.recovered_gradient(v0), info, lap_v0)


def build_reference(init: InitialData, cmap: ConformalMap) -> ReferenceProfiles:
    """``phi``, ``q_phi`` and the fixed gradients from pulled-back initial data.

    When the data come with a stream function its Laplacian is taken from
    the continuous velocity.
    """
    if init.v0_tilde is None or init.G0_tilde is None:
        raise ValidationError("initial data lack reference-domain fields")
    mesh = init.v0_tilde.mesh
    lap = stream_laplacian(init, mesh) if init.stream is not None else None
    return reference_from_nodal(mesh, cmap, init.v0_tilde.nodal(), init.G0_tilde.nodal(), lap)


# --- state ----------------------------------------------------------------------------

def _inverse_2x2(A: np.ndarray, det_floor: float, where: str):
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    dmin = float(det.min())
    if not np.isfinite(dmin) or dmin < det_floor:
        raise FluxDegenerate(f"det grad X = {dmin:.3g} below floor {det_floor:.1e} ({where})")
    inv = np.empty_like(A)
    inv[..., 0, 0] = A[..., 1, 1]
    inv[..., 1, 1] = A[..., 0, 0]
    inv[..., 0, 1] = -A[..., 0, 1]
    inv[..., 1, 0] = -A[..., 1, 0]
    return inv / det[..., None, None], det


def flux_inverse(mesh: ReferenceMesh, X: np.ndarray, det_floor: float = DET_FLOOR):
    """``zeta = (grad X)^{-1}`` at nodes (recovered gradient) and at quadrature points.

    Parameters
    ----------
    X : (n_times, nn, 2)

    Returns
    -------
    zeta_nodes : (n_times, nn, 2, 2)
    zeta_quad : (n_times, nt, 7, 2, 2)

    Raises
    ------
    FluxDegenerate
        If ``det grad X < det_floor`` at any node or quadrature point.
    """
    gq = np.stack([mesh.grad_at_quad(x) for x in X])
    gn = np.stack([mesh.recovered_gradient(x) for x in X])
    zq, _ = _inverse_2x2(gq, det_floor, "quadrature points")
    zn, _ = _inverse_2x2(gn, det_floor, "nodes")
    return zn, zq


@dataclass(eq=False)
class LagrangianState:
    """One slab of the iteration on the grid ``t_k = k T / n``."""

    ref: ReferenceProfiles
    T: float
    X: np.ndarray      # (n+1, nn, 2)
    w: np.ndarray      # (n+1, nn, 2)
    q_w: np.ndarray    # (n+1, nv)
    G: np.ndarray      # (n+1, nn, 2)
    zeta: np.ndarray | None = None       # (n+1, nn, 2, 2)
    zeta_quad: np.ndarray | None = None  # (n+1, nt, 7, 2, 2)

    @property
    def mesh(self) -> ReferenceMesh:
        return self.ref.mesh

    @property
    def n_steps(self) -> int:
        return self.X.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def v(self) -> np.ndarray:
        return self.w + self.ref.phi(self.times)

    @property
    def qfull(self) -> np.ndarray:
        """``q_w + q_phi`` as P2 nodal values (n+1, nn)."""
        return _p1_to_p2(self.mesh, self.q_w) + self.ref.q_phi[None]

    @property
    def Xhat(self) -> np.ndarray:
        return self.ref.Xhat(self.times)

    @property
    def Ghat(self) -> np.ndarray:
        return self.ref.Ghat(self.times)

    def with_flux_inverse(self, det_floor: float = DET_FLOOR) -> "LagrangianState":
        self.zeta, self.zeta_quad = flux_inverse(self.mesh, self.X, det_floor)
        return self

    def trajectory(self, name: str) -> Trajectory:
        """Trajectory of ``X``, ``w``, ``v``, ``G`` (P2-vector) or ``q_w`` (P1)."""
        if name == "q_w":
            return Trajectory(self.mesh, "P1-scalar", self.T, self.q_w)
        arr = getattr(self, name)
        return Trajectory(self.mesh, "P2-vector", self.T,
                          np.transpose(arr, (0, 2, 1)).reshape(arr.shape[0], -1))


def seed_state(ref: ReferenceProfiles, T: float, n_steps: int,
               det_floor: float = DET_FLOOR) -> LagrangianState:
    """``((w, q_w), X, G) = ((0, 0), Xhat, Ghat)``."""
    t = np.linspace(0.0, T, n_steps + 1)
    nn, nv = ref.mesh.n_nodes, ref.mesh.n_vertices
    st = LagrangianState(ref, T, ref.Xhat(t), np.zeros((n_steps + 1, nn, 2)),
                         np.zeros((n_steps + 1, nv)), ref.Ghat(t))
    return st.with_flux_inverse(det_floor)


# --- nonlinear data -----------------------------------------------------------------

@dataclass(eq=False)
class _Frozen:
    """Per-mesh coefficient samples shared by all sweeps."""

    Jq: np.ndarray
    Q2q: np.ndarray
    dJq: np.ndarray       # (nt, 7, 2, 2, 2) grad J at quad points
    Je: np.ndarray        # edge points
    Jie: np.ndarray
    m0: np.ndarray        # J^{-1} n0 at edge points (ne, 3, 2)


def _frozen(mesh: ReferenceMesh, cmap: ConformalMap) -> _Frozen:
    key = ("picard_frozen", cmap)
    if key in mesh.cache:
        return mesh.cache[key]
    xq = mesh.quad_points
    ep, _, en, _, _ = mesh.edge_quad
    Jie = jacobian_inverse_at(cmap, ep)
    fr = _Frozen(jacobian_at(cmap, xq), q_squared_at(cmap, xq), jacobian_grad_at(cmap, xq),
                 jacobian_at(cmap, ep), Jie, np.einsum("eqij,ej->eqi", Jie, en))
    mesh.cache[key] = fr
    return fr


def _recovered_lap(mesh, gv_nodal):
    """``sum_j d_j (grad v)_ij`` at quad points from a nodal gradient."""
    return np.trace(mesh.grad_at_quad(gv_nodal), axis1=-2, axis2=-1)


def _projected_lap(mesh, v):
    """Componentwise recovered Laplacian at quad points, built as for ``phi_hat``."""
    return mesh.at_quad(np.stack([mesh.recovered_laplacian(v[:, i]) for i in range(2)], axis=1))


def _project_f(mesh, fr: _Frozen, fq: np.ndarray) -> np.ndarray:
    """Replace quad values by those of their 1/Q2-weighted P2 projection.

    The load vector is unchanged while discrete identities that hold in
    the projected sense (such as the definition of ``phi_hat``) become
    exact at quadrature points.
    """
    return mesh.at_quad(weighted_projection(mesh, fq, 1.0 / fr.Q2q))


def reference_data(ref: ReferenceProfiles, T: float, n_steps: int,
                   compatibility_correction: bool = True) -> LinearStokesData:
    """The group depending only on the initial data.

    ``f = -phi_hat + Q2 Lap phi - J^T grad q_phi + grad G0 J G0``,
    ``g = -Tr(grad phi zeta_phi J_phi)``,
    ``h = q_phi m0 - (grad phi J + (grad phi J)^T) m0 - G0 G0^T m0``
    with ``m0 = J^{-1} n0``, ``zeta_phi = I - t grad(J v0)`` and
    ``J_phi = J + t (d_k J) (J v0)_k``.

    For exact initial data these vanish at ``t = 0`` (with ``d_t g``). The
    sampled data miss that by their discretization error, which would
    make ``w`` jump at the first step; with ``compatibility_correction``
    the initial traces are subtracted (see
    :meth:`LinearStokesData.remove_initial_traces`). Their size before
    the correction is what ``IterationReport.reference_trace_defect`` holds.
    """
    mesh = ref.mesh
    fr = _frozen(mesh, ref.cmap)
    out = LinearStokesData.zeros(mesh, T, n_steps)
    if ref.is_zero:
        return out
    times = out.times
    gq_phi = mesh.grad_at_quad(ref.q_phi)
    Jt_gq = np.einsum("tqki,tqk->tqi", fr.Jq, gq_phi)
    G0q = mesh.at_quad(ref.G0)
    fG0 = _matvec(mesh.grad_at_quad(ref.G0) @ fr.Jq, G0q)
    grad_Jv0 = mesh.grad_at_quad(ref.Jv0)
    Jv0q = mesh.at_quad(ref.Jv0)
    dJ_dir = np.einsum("tqijk,tqk->tqij", fr.dJq, Jv0q)
    lap_v0 = _projected_lap(mesh, ref.v0) if ref.lap_v0 is None else ref.lap_v0
    lap_ph = _projected_lap(mesh, ref.phi_hat)
    phq = mesh.at_quad(ref.phi_hat)
    gv0q = mesh.grad_at_quad(ref.v0)
    gphq = mesh.grad_at_quad(ref.phi_hat)
    qe = boundary_values(mesh, ref.q_phi)
    G0e = boundary_values(mesh, ref.G0)
    gv0e = boundary_gradient(mesh, ref.v0)
    gphe = boundary_gradient(mesh, ref.phi_hat)
    hG0 = -G0e * np.sum(G0e * fr.m0, -1)[..., None]
    I = np.eye(2)
    for k, t in enumerate(times):
        lap_phi = lap_v0 + t * lap_ph
        f = -phq + fr.Q2q[..., None] * lap_phi - Jt_gq + fG0
        out.f[k] = f
        gphi = gv0q + t * gphq
        zeta_phi = I - t * grad_Jv0
        J_phi = fr.Jq + t * dJ_dir
        out.g[k] = -np.trace(gphi @ zeta_phi @ J_phi, axis1=-2, axis2=-1)
        A = (gv0e + t * gphe) @ fr.Je
        S = A + np.swapaxes(A, -1, -2)
        out.h[k] = qe[..., None] * fr.m0 - _matvec(S, fr.m0) + hG0
    out.f[:] = np.stack([_project_f(mesh, fr, f) for f in out.f])
    return out.remove_initial_traces() if compatibility_correction else out


def assemble_fgh(state: LagrangianState, cmap: ConformalMap, phi=None, q_phi=None,
                 det_floor: float = DET_FLOOR, check: bool = True) -> LinearStokesData:
    """Nonlinear group ``(f^(n) - f_G0, gbar^(n), h^(n) - h_G0)`` of a frozen iterate.

    ``phi`` and ``q_phi`` default to the state's reference profiles; they
    may be given as a :class:`~splashmhd.initdata.PhiProfile` and a P2
    field. With ``check`` the zero initial traces are verified.

    Raises
    ------
    FluxDegenerate
        If ``det grad X < det_floor`` anywhere.
    DataTraceViolation
        If ``check`` and the data do not vanish at ``t = 0``.
    """
    ref = state.ref
    if phi is not None or q_phi is not None:
        ref = ReferenceProfiles(ref.mesh, cmap,
                                ref.v0 if phi is None else phi.v0,
                                ref.G0,
                                ref.phi_hat if phi is None else phi.phi_hat,
                                ref.q_phi if q_phi is None else np.asarray(q_phi.dofs),
                                ref.grad_v0, ref.info, ref.lap_v0)
    mesh = ref.mesh
    fr = _frozen(mesh, cmap)
    if state.zeta is None or state.zeta_quad is None:
        state.with_flux_inverse(det_floor)
    times = state.times
    out = LinearStokesData.zeros(mesh, state.T, state.n_steps)
    if ref.is_zero and not (np.any(state.w) or np.any(state.q_w)):
        return out
    ep = mesh.edge_quad[0]
    en = mesh.edge_quad[2]
    I = np.eye(2)
    G0q = mesh.at_quad(ref.G0)
    fG0 = _matvec(mesh.grad_at_quad(ref.G0) @ fr.Jq, G0q)
    G0e = boundary_values(mesh, ref.G0)
    hG0 = -G0e * np.sum(G0e * fr.m0, -1)[..., None]
    grad_Jv0 = mesh.grad_at_quad(ref.Jv0)
    dJ_dir = np.einsum("tqijk,tqk->tqij", fr.dJq, mesh.at_quad(ref.Jv0))
    gv0q = mesh.grad_at_quad(ref.v0)
    gphq = mesh.grad_at_quad(ref.phi_hat)
    v_all = state.w + ref.phi(times)
    q_all = _p1_to_p2(mesh, state.q_w) + ref.q_phi[None]
    for k, t in enumerate(times):
        v, q, G, X = v_all[k], q_all[k], state.G[k], state.X[k]
        zn, zq = state.zeta[k], state.zeta_quad[k]
        Xq = mesh.at_quad(X)
        JX = jacobian_at(cmap, Xq)
        Q2X = q_squared_at(cmap, Xq)
        gv = mesh.recovered_gradient(v)
        lap = _recovered_lap(mesh, gv)
        # Q2(X) grad(grad v zeta) zeta: contract d_m (grad v zeta)_ij with zeta_mj
        d_gz = mesh.grad_at_quad(gv @ zn)   # (nt, 7, 2, 2, 2) [i, j, m]
        lag_lap = np.einsum("tqijm,tqmj->tqi", d_gz, zq)
        gq = mesh.grad_at_quad(q)
        Gq = mesh.at_quad(G)
        gGq = mesh.grad_at_quad(G)
        zJX = zq @ JX
        f = (-fr.Q2q[..., None] * lap + np.einsum("tqki,tqk->tqi", fr.Jq, gq)
             + Q2X[..., None] * lag_lap - np.einsum("tqki,tqk->tqi", zJX, gq)
             + _matvec(gGq @ zJX, Gq)) - fG0
        out.f[k] = _project_f(mesh, fr, f)
        gvq = mesh.grad_at_quad(v)
        g_n = np.trace(gvq @ fr.Jq, axis1=-2, axis2=-1) - np.trace(gvq @ zJX, axis1=-2, axis2=-1)
        gphi = gv0q + t * gphq
        zeta_phi = I - t * grad_Jv0
        J_phi = fr.Jq + t * dJ_dir
        out.g[k] = g_n + np.trace(gphi @ zeta_phi @ J_phi, axis1=-2, axis2=-1) \
            - np.trace(gphi @ fr.Jq, axis1=-2, axis2=-1)
        # boundary terms
        gXe = boundary_gradient(mesh, X)
        Xe = boundary_values(mesh, X)
        JXe = jacobian_at(cmap, Xe)
        JXie = jacobian_inverse_at(cmap, Xe)
        gLam = -np.einsum("ij,eqjk,kl->eqil", LAMBDA, gXe, LAMBDA)
        mX = _matvec(JXie @ gLam, np.broadcast_to(en[:, None, :], ep.shape))
        zeta_e, _ = _inverse_2x2(gXe, det_floor, "boundary edge points")
        gve = boundary_gradient(mesh, v)
        qe = boundary_values(mesh, q)
        Ge = boundary_values(mesh, G)
        A0 = gve @ fr.Je
        AX = gve @ zeta_e @ JXe
        h = (-qe[..., None] * fr.m0 + qe[..., None] * mX
             + _matvec(A0 + np.swapaxes(A0, -1, -2), fr.m0)
             - _matvec(AX + np.swapaxes(AX, -1, -2), mX)
             - Ge * np.sum(Ge * mX, -1)[..., None])
        out.h[k] = h - hG0
    if check:
        scale = float(np.ptp(mesh.vertices, axis=0).max())
        out.check_traces(scale=scale)
    return out


# --- transport updates ----------------------------------------------------------------

def _cumulative_trapezoid(rate: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(rate)
    out[1:] = np.cumsum(0.5 * dt * (rate[1:] + rate[:-1]), axis=0)
    return out


def update_G(state: LagrangianState, v: np.ndarray | None = None, dt: float | None = None,
             cmap: ConformalMap | None = None) -> np.ndarray:
    """``G0 + int_0^t grad v zeta J(X) G`` with iteration-``n`` coefficients.

    ``v`` defaults to ``w + phi`` of the state.
    """
    mesh = state.mesh
    cmap = cmap or state.ref.cmap
    dt = state.dt if dt is None else dt
    v = state.v if v is None else v
    if state.zeta is None:
        state.with_flux_inverse()
    if not np.any(state.G):
        return np.zeros_like(state.G)
    rate = np.empty_like(state.G)
    for k in range(state.n_steps + 1):
        gv = mesh.recovered_gradient(v[k])
        JX = jacobian_at(cmap, state.X[k])
        rate[k] = _matvec(gv @ state.zeta[k] @ JX, state.G[k])
    return state.ref.G0[None] + _cumulative_trapezoid(rate, dt)


def update_X(state: LagrangianState, v: np.ndarray | None = None,
             cmap: ConformalMap | None = None, dt: float | None = None,
             det_floor: float = DET_FLOOR):
    """``omega + int_0^t J(X) v`` and its flux inverse.

    Returns
    -------
    X : (n+1, nn, 2)
    zeta_nodes, zeta_quad : see :func:`flux_inverse`
    """
    cmap = cmap or state.ref.cmap
    dt = state.dt if dt is None else dt
    v = state.v if v is None else v
    rate = _matvec(jacobian_at(cmap, state.X), v)
    X = state.ref.omega[None] + _cumulative_trapezoid(rate, dt)
    zn, zq = flux_inverse(state.mesh, X, det_floor)
    return X, zn, zq


# --- norms ---------------------------------------------------------------------------

def _l2h1(traj: Trajectory) -> float:
    mesh = traj.mesh
    cols = traj.columns()
    M = mesh.mass_matrix()
    K = mesh.stiffness_matrix()
    n = cols.shape[0]
    w = np.full(n, traj.T / (n - 1))
    w[[0, -1]] *= 0.5
    tot = 0.0
    for k in range(n):
        c = cols[k]
        tot += w[k] * float(np.sum(c * (M @ c)) + np.sum(c * (K @ c)))
    return float(np.sqrt(tot))


def quadruple_norms(state_or_diff, cfg: PicardConfig) -> dict:
    """Norms of ``(w, q_w, X, G)`` trajectories of a state (or of a difference).

    Beale mode: ``K^{s+1}``, ``Kpr^s``, ``A^{s+1, gamma+1}``, ``A^{s, gamma}``.
    """
    st = state_or_diff
    tr = {k: st.trajectory(k) for k in ("w", "q_w", "X", "G")}
    if cfg.norm == "l2h1":
        return {k: _l2h1(v) for k, v in tr.items()}
    nc = cfg.norms
    s, g = nc.s, nc.gamma
    compute_eigenbasis(st.mesh, nc.n_space_modes)
    return {"w": composite_norm(tr["w"], "K", nc, s=s + 1),
            "q_w": composite_norm(tr["q_w"], "Kpr", nc, s=s),
            "X": composite_norm(tr["X"], "A", nc, s=s + 1, gamma=g + 1),
            "G": composite_norm(tr["G"], "A", nc, s=s, gamma=g)}


def state_difference(a: LagrangianState, b: LagrangianState) -> LagrangianState:
    return LagrangianState(a.ref, a.T, a.X - b.X, a.w - b.w, a.q_w - b.q_w, a.G - b.G)


# --- ball radius -----------------------------------------------------------------------

def ball_radius(ref: ReferenceProfiles, cfg: PicardConfig, horizon: float = 1.0) -> dict:
    """Size ``N`` of the ball the iterates are expected to stay in.

    ``N = |t^2/2 J phi_hat|_A + |t^2/2 grad phi_hat J G0|_A + |L^{-1}(reference data)|``
    with all norms taken over ``[0, horizon]``.
    """
    n = max(cfg.ball_steps, 4)
    mesh = ref.mesh
    t = np.linspace(0.0, horizon, n + 1)
    nn, nv = mesh.n_nodes, mesh.n_vertices
    zX = 0.5 * t[:, None, None] ** 2 * _matvec(ref.J_nodes, ref.phi_hat)[None]
    gph = mesh.recovered_gradient(ref.phi_hat)
    zG = 0.5 * t[:, None, None] ** 2 * _matvec(gph @ ref.J_nodes, ref.G0)[None]
    if ref.is_zero:
        wq = (np.zeros((n + 1, nn, 2)), np.zeros((n + 1, nv)))
    else:
        sys = assemble_operator(mesh, ref.cmap, horizon / n)
        sol = solve_slab(sys, reference_data(ref, horizon, n), check_traces=False)
        wq = (sol.w, sol.q)
    pseudo = LagrangianState(ref, horizon, zX, wq[0], wq[1], zG)
    nrm = quadruple_norms(pseudo, cfg)
    parts = {"X": nrm["X"], "G": nrm["G"], "wq": nrm["w"] + nrm["q_w"]}
    parts["N"] = parts["X"] + parts["G"] + parts["wq"]
    return parts


def ball_distances(state: LagrangianState, ref_solution, cfg: PicardConfig) -> dict:
    """Distances of an iterate to the ball centres."""
    t = state.times
    ref = state.ref
    X_c = ref.Xhat(t) + 0.5 * t[:, None, None] ** 2 * _matvec(ref.J_nodes, ref.phi_hat)[None]
    gph = ref.mesh.recovered_gradient(ref.phi_hat)
    G_c = ref.Ghat(t) + 0.5 * t[:, None, None] ** 2 * _matvec(gph @ ref.J_nodes, ref.G0)[None]
    w_c, q_c = ref_solution
    d = LagrangianState(ref, state.T, state.X - X_c, state.w - w_c, state.q_w - q_c, state.G - G_c)
    nrm = quadruple_norms(d, cfg)
    return {"X": nrm["X"], "G": nrm["G"], "wq": nrm["w"] + nrm["q_w"]}


# --- driver -----------------------------------------------------------------------------

@dataclass
class IterationReport:
    """Per-iteration diff norms and contraction diagnostics."""

    diffs: list = field(default_factory=list)       # [{"w", "q_w", "X", "G"}]
    sizes: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    T: float = 0.0
    n_steps: int = 0
    halvings: int = 0
    norm: str = "beale"
    ball_radii: dict = field(default_factory=dict)   # {"N": ..., "measured": [...]}
    reference_trace_defect: dict = field(default_factory=dict)
    attempts: list = field(default_factory=list)

    def total_diffs(self) -> list:
        return [float(sum(d.values())) for d in self.diffs]

    @property
    def contraction_ratio(self) -> float:
        """Geometric mean of the successive diff ratios (nan with fewer than two diffs)."""
        r = np.asarray([x for x in self.ratios if x > 0])
        return float(np.exp(np.mean(np.log(r)))) if len(r) else float("nan")

    def monotone_prefix(self) -> int:
        """Number of leading iterations over which the total diff strictly decreases."""
        d = self.total_diffs()
        k = 1
        while k < len(d) and d[k] < d[k - 1]:
            k += 1
        return k if d else 0

    def to_dict(self) -> dict:
        return asdict(self)


def _total(d: dict) -> float:
    return float(sum(d.values()))


def _write_checkpoint(root: Path, k: int, state: LagrangianState) -> None:
    d = root / f"iter_{k:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for name in ("X", "w", "q_w", "G"):
        save_trajectory(state.trajectory(name), d / name)


def _write_checkpoint_header(root: Path, ref: ReferenceProfiles, cfg: PicardConfig) -> None:
    root.mkdir(parents=True, exist_ok=True)
    save_mesh(ref.mesh, root / "mesh.json")
    m = ref.cmap
    meta = {"alpha": [m.alpha.real, m.alpha.imag],
            "branch_cut": [[z.real, z.imag] for z in m.branch_cut],
            "scale": m.scale, "branch_selector": m.branch_selector}
    (root / "cmap.json").write_text(json.dumps(meta))
    for name in ("v0", "G0", "phi_hat"):
        arr = getattr(ref, name)
        save_trajectory(Trajectory(ref.mesh, "P2-vector", 1.0, arr.T.reshape(1, -1)),
                        root / f"ref_{name}")
    save_trajectory(Trajectory(ref.mesh, "P2-scalar", 1.0, ref.q_phi[None]), root / "ref_q_phi")


def load_checkpoints(root) -> tuple[ReferenceProfiles, list]:
    """Reference profiles and the per-iteration states stored under ``root``.

    Raises
    ------
    MissingCheckpoint
        If the directory or its iteration folders are missing.
    """
    from .errors import MissingCheckpoint

    root = Path(root)
    iters = sorted(root.glob("iter_*")) if root.is_dir() else []
    if not (root / "mesh.json").exists() or not iters:
        raise MissingCheckpoint(f"no checkpoints under {root}")
    mesh = load_mesh(root / "mesh.json")
    meta = json.loads((root / "cmap.json").read_text())
    cmap = ConformalMap(complex(*meta["alpha"]), tuple(complex(*z) for z in meta["branch_cut"]),
                        meta["scale"], meta["branch_selector"])
    vec = lambda name: load_trajectory(mesh, root / f"ref_{name}").dofs[0].reshape(2, -1).T
    v0 = vec("v0")
    ref = ReferenceProfiles(mesh, cmap, v0, vec("G0"), vec("phi_hat"),
                            load_trajectory(mesh, root / "ref_q_phi").dofs[0],
                            mesh.recovered_gradient(v0))
    states = []
    for d in iters:
        tr = {n: load_trajectory(mesh, d / n) for n in ("X", "w", "q_w", "G")}
        unvec = lambda t: t.dofs.reshape(t.dofs.shape[0], 2, -1).transpose(0, 2, 1)
        states.append(LagrangianState(ref, tr["X"].T, unvec(tr["X"]), unvec(tr["w"]),
                                      tr["q_w"].dofs, unvec(tr["G"])))
    return ref, states


def _picard_attempt(ref, cmap, T, n_steps, cfg, sys_cache, report, checkpoint_dir):
    mesh = ref.mesh
    dt = T / n_steps
    key = round(dt, 15)
    if key not in sys_cache:
        sys_cache[key] = assemble_operator(mesh, cmap, dt)
    sys: StokesSystem = sys_cache[key]
    raw = reference_data(ref, T, n_steps, compatibility_correction=False)
    report.reference_trace_defect = raw.trace_defects()
    refdata = raw.remove_initial_traces()
    ref_sol = None
    if cfg.compute_ball:
        s0 = solve_slab(sys, refdata, check_traces=False)
        ref_sol = (s0.w, s0.q)
    state = seed_state(ref, T, n_steps, cfg.det_floor)
    if checkpoint_dir is not None:
        _write_checkpoint(checkpoint_dir, 0, state)
    diffs, sizes, ratios, measured = [], [], [], []
    converged = False
    for it in range(1, cfg.max_iter + 1):
        data = assemble_fgh(state, cmap, det_floor=cfg.det_floor) + refdata
        sol = solve_slab(sys, data, check_traces=False)
        G_new = update_G(state, cmap=cmap)
        X_new, zn, zq = update_X(state, cmap=cmap, det_floor=cfg.det_floor)
        new = LagrangianState(ref, T, X_new, sol.w, sol.q, G_new, zn, zq)
        d = quadruple_norms(state_difference(new, state), cfg)
        sz = quadruple_norms(new, cfg)
        diffs.append(d)
        sizes.append(sz)
        if len(diffs) > 1 and _total(diffs[-2]) > 0:
            ratios.append(_total(d) / _total(diffs[-2]))
        if cfg.compute_ball:
            measured.append(ball_distances(new, ref_sol, cfg))
        state = new
        if checkpoint_dir is not None:
            _write_checkpoint(checkpoint_dir, it, state)
        log.info("picard T=%.4g it=%d diff=%.3e", T, it, _total(d))
        if all(d[k] <= cfg.tol * max(1.0, sz[k]) for k in d):
            converged = True
            break
        first = _total(diffs[0])
        if not np.isfinite(_total(d)) or (first > 0 and _total(d) > cfg.divergence_factor * first):
            break
    report.attempts.append({"T": T, "n_steps": n_steps, "n_iter": len(diffs),
                            "converged": converged,
                            "final_diff": _total(diffs[-1]) if diffs else 0.0})
    return state, converged, diffs, sizes, ratios, measured


def run_picard(init, cmap: ConformalMap, slab: float | None = None, tol: float | None = None,
               max_iter: int | None = None, config: PicardConfig | None = None,
               checkpoint_dir=None, reference: ReferenceProfiles | None = None):
    """Iterate to a fixed point on ``[0, T]``, halving the slab on failure.

    Parameters
    ----------
    init : InitialData or ReferenceProfiles
        Initial data with reference-domain fields ``v0_tilde`` and ``G0_tilde``.
    slab, tol, max_iter : optional
        Override the corresponding :class:`PicardConfig` entries.
    checkpoint_dir : path, optional
        Per-iteration trajectories are written there.

    Returns
    -------
    (LagrangianState, IterationReport)

    Raises
    ------
    NoConvergence
        When no slab length down to ``T / 2**max_halvings`` converges.
    FluxDegenerate
        Propagated from the flux updates.
    """
    cfg = config or PicardConfig()
    over = {}
    if slab is not None:
        over["T"] = float(slab)
    if tol is not None:
        over["tol"] = float(tol)
    if max_iter is not None:
        over["max_iter"] = int(max_iter)
    if over:
        cfg = PicardConfig(**{**cfg.__dict__, **over})
    if reference is not None:
        ref = reference
    elif isinstance(init, ReferenceProfiles):
        ref = init
    else:
        ref = build_reference(init, cmap)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    report = IterationReport(norm=cfg.norm)
    if cfg.compute_ball:
        report.ball_radii["bound"] = ball_radius(ref, cfg)
    sys_cache: dict = {}
    T, n = cfg.T, cfg.n_steps
    for attempt in range(cfg.max_halvings + 1):
        if ckpt is not None:
            for old in ckpt.glob("iter_*"):
                for f in old.iterdir():
                    f.unlink()
                old.rmdir()
            _write_checkpoint_header(ckpt, ref, cfg)
        state, ok, diffs, sizes, ratios, measured = _picard_attempt(
            ref, cmap, T, n, cfg, sys_cache, report, ckpt)
        if ok:
            report.diffs, report.sizes, report.ratios = diffs, sizes, ratios
            report.converged = True
            report.n_iter = len(diffs)
            report.T, report.n_steps, report.halvings = T, n, attempt
            report.ball_radii["measured"] = measured
            return state, report
        T, n = T / 2, max(3, n // 2)
    raise NoConvergence(
        f"no convergence after {cfg.max_halvings} slab halvings (last T={2 * T:.4g}); "
        f"attempts: {report.attempts}")


# --- diagnostics -----------------------------------------------------------------------

def cauchy_invariant_error(state: LagrangianState, cmap: ConformalMap | None = None) -> float:
    """Relative error of ``G = J(X)^{-1} grad X J G0`` (Lagrangian field transport).

    The identity is the reference-domain form of ``H(t, x(t, a)) = grad_a x H0(a)``
    for ``x = P^{-1} o X o P``. Returns the max over time of the relative
    L2 discrepancy.
    """
    cmap = cmap or state.ref.cmap
    mesh = state.mesh
    M = mesh.mass_matrix()
    J0 = jacobian_at(cmap, mesh.nodes)
    norm0 = np.sqrt(np.sum(state.ref.G0 * (M @ state.ref.G0)))
    if norm0 == 0:
        return 0.0
    worst = 0.0
    for k in range(state.n_steps + 1):
        gX = mesh.recovered_gradient(state.X[k])
        pred = _matvec(jacobian_inverse_at(cmap, state.X[k]) @ gX @ J0, state.ref.G0)
        e = state.G[k] - pred
        worst = max(worst, float(np.sqrt(np.sum(e * (M @ e))) / norm0))
    return worst


def divergence_diagnostics(state: LagrangianState, cmap: ConformalMap | None = None) -> dict:
    """``L2(0,T; L2)`` size of ``Tr(grad v zeta J(X))`` and ``Tr(grad G zeta J(X))``."""
    cmap = cmap or state.ref.cmap
    mesh = state.mesh
    if state.zeta_quad is None:
        state.with_flux_inverse()
    v = state.v
    n = state.n_steps
    w = np.full(n + 1, state.dt)
    w[[0, -1]] *= 0.5
    dv = dG = 0.0
    for k in range(n + 1):
        zJX = state.zeta_quad[k] @ jacobian_at(cmap, mesh.at_quad(state.X[k]))
        tv = np.trace(mesh.grad_at_quad(v[k]) @ zJX, axis1=-2, axis2=-1)
        tg = np.trace(mesh.grad_at_quad(state.G[k]) @ zJX, axis1=-2, axis2=-1)
        dv += w[k] * float(np.sum(mesh.quad_weights * tv ** 2))
        dG += w[k] * float(np.sum(mesh.quad_weights * tg ** 2))
    return {"div_v": float(np.sqrt(dv)), "div_G": float(np.sqrt(dG))}


def energy_parts(mesh: ReferenceMesh, cmap: ConformalMap, X, v, G):
    """Kinetic and magnetic parts of the physical energy per time sample.

    Pulled back to the labels with ``dx = det grad X / Q2(X) d omega``.
    """
    kin = np.empty(len(X))
    mag = np.empty(len(X))
    for k in range(len(X)):
        gX = mesh.grad_at_quad(X[k])
        det = gX[..., 0, 0] * gX[..., 1, 1] - gX[..., 0, 1] * gX[..., 1, 0]
        wq = mesh.quad_weights * det / q_squared_at(cmap, mesh.at_quad(X[k]))
        kin[k] = 0.5 * float(np.sum(wq * np.sum(mesh.at_quad(v[k]) ** 2, -1)))
        mag[k] = 0.5 * float(np.sum(wq * np.sum(mesh.at_quad(G[k]) ** 2, -1)))
    return kin, mag


def energy(state: LagrangianState, cmap: ConformalMap | None = None) -> np.ndarray:
    """``E(t) = 0.5 int (|u|^2 + |H|^2) dx`` on the moving physical domain."""
    kin, mag = energy_parts(state.mesh, cmap or state.ref.cmap, state.X, state.v, state.G)
    return kin + mag


@dataclass(eq=False)
class PhysicalTrajectory:
    """Moving-domain samples: boundary polylines and nodal fields at ``P^{-1}(X)``."""

    times: np.ndarray
    boundaries: list         # (nb, 2) arrays, counterclockwise P2 boundary loop images
    points: np.ndarray       # (n+1, nn, 2)
    u: np.ndarray            # (n+1, nn, 2)
    q: np.ndarray            # (n+1, nn)
    H: np.ndarray            # (n+1, nn, 2)

    @property
    def p(self) -> np.ndarray:
        """``q + |H|^2 / 2``."""
        return self.q + 0.5 * np.sum(self.H ** 2, axis=-1)


def reconstruct_physical(state: LagrangianState, cmap: ConformalMap | None = None) -> PhysicalTrajectory:
    """Push the Lagrangian solution forward to the physical plane.

    Raises
    ------
    FluxDegenerate
        If the flux has degenerated on the slab.
    """
    cmap = cmap or state.ref.cmap
    if state.zeta is None:
        state.with_flux_inverse()
    z = as_complex(state.X) ** 2 + cmap.alpha
    pts = as_real(z)
    loop = state.mesh.boundary_p2_loop
    bnd = [pts[k, loop] for k in range(state.n_steps + 1)]
    return PhysicalTrajectory(state.times, bnd, pts, state.v.copy(), state.qfull.copy(),
                              state.G.copy())


def final_initial_data(state: LagrangianState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flux, velocity and magnetic field at the slab end (for chaining slabs)."""
    return state.X[-1].copy(), state.v[-1].copy(), state.G[-1].copy()
