"""Compatible initial data built from stream functions.

The velocity comes from a stream function that is quadratic in the normal
offset near the physical boundary,

    psi = psi0(rho) + 0.5 * psi2(rho) * lam**2,

blended to a constant deep inside; ``u0 = Lambda grad psi`` is then
divergence free and its tangential stress balances the magnetic stress on
the boundary once ``psi2 = psi0'' + (T.H0)(H0.N)``.

Boundary profiles use the clockwise arc length ``rho = L - s`` (``s`` the
counterclockwise parameter of :mod:`geometry`). With ``T = dz/drho`` and
``N`` the outward normal this gives ``u0 . n = d psi0 / d rho``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .conformal import (LAMBDA, ConformalMap, as_complex, as_real, jacobian_at,
                        jacobian_inverse_at, q_squared_at)
from .errors import CompatibilityFailed, EllipticSolveFailed, TraceFailure, ValidationError
from .geometry import (BoundaryCurve, TubularFrame, arclength_normalize, foot_points,
                       frame_at, projection_candidates)
from .mesh_fields import DiscreteField, ReferenceMesh


# --- periodic profiles ---------------------------------------------------------

@dataclass(frozen=True)
class FourierProfile:
    """``f(rho) = slope*rho + a[0] + sum_k a[k] cos(k w rho) + b[k] sin(k w rho)``
    with ``w = 2 pi / L``; ``b[0]`` is ignored."""

    L: float
    a: tuple = (0.0,)
    b: tuple = ()
    slope: float = 0.0

    def __call__(self, rho, der: int = 0) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        w = 2 * np.pi / self.L
        a = np.asarray(self.a, dtype=float)
        b = np.zeros_like(a)
        bb = np.asarray(self.b, dtype=float)
        k_b = min(len(a), len(bb))
        b[1:k_b] = bb[1:k_b]
        k = np.arange(len(a))
        ph = np.multiply.outer(rho, k * w)
        # d^m/drho^m of cos and sin via phase shift
        fac = (k * w) ** der
        shift = der * np.pi / 2
        out = np.cos(ph + shift) @ (a * fac) + np.sin(ph + shift) @ (b * fac)
        if der == 0:
            out = out + self.slope * rho
        elif der == 1:
            out = out + self.slope
        return out

    @classmethod
    def from_samples(cls, values, L: float) -> "FourierProfile":
        """Trigonometric interpolant of samples at ``rho_j = j L / n``."""
        v = np.asarray(values, dtype=float)
        n = len(v)
        c = np.fft.rfft(v) / n
        a = 2 * c.real
        b = -2 * c.imag
        a[0] = c[0].real
        if n % 2 == 0:
            a[-1] = c[-1].real
            b[-1] = 0.0
        return cls(L, tuple(a), tuple(b), 0.0)

    def scaled(self, factor: float) -> "FourierProfile":
        return FourierProfile(self.L, tuple(np.asarray(self.a) * factor),
                              tuple(np.asarray(self.b) * factor), self.slope * factor)


def bump_flux_profile(L: float, centers, width: float, amplitude: float,
                      n_modes: int = 64, mean: float = 0.0) -> FourierProfile:
    """Profile whose derivative is a sum of periodic Gaussian bumps.

    ``psi0'(rho) = amplitude * (sum_c g(rho - c) - mean(g))`` so that psi0 is
    periodic; ``mean`` adds a constant offset to psi0 itself.
    """
    n = max(4 * n_modes, 256)
    rho = np.arange(n) * L / n
    g = np.zeros(n)
    for c in centers:
        d = (rho - c + L / 2) % L - L / 2
        g += np.exp(-0.5 * (d / width) ** 2)
    g = amplitude * (g - g.mean())
    spec = np.fft.rfft(g) / n
    k = np.arange(len(spec))
    w = 2 * np.pi / L
    # integrate term by term: cos -> sin/(kw), sin -> -cos/(kw)
    a = np.zeros(min(n_modes, len(spec)))
    b = np.zeros_like(a)
    for j in range(1, len(a)):
        ca, cb = 2 * spec[j].real, -2 * spec[j].imag
        a[j] = -cb / (j * w)
        b[j] = ca / (j * w)
    a[0] = mean
    return FourierProfile(L, tuple(a), tuple(b), 0.0)


# --- magnetic stream -----------------------------------------------------------

@dataclass(frozen=True)
class PolynomialStream:
    """Stream function ``sum c_ij x^i y^j`` for the magnetic field ``Lambda grad``."""

    coeffs: tuple = ()  # ((i, j, c), ...)

    def value(self, pts):
        x, y = pts[..., 0], pts[..., 1]
        out = np.zeros(x.shape)
        for i, j, c in self.coeffs:
            out = out + c * x ** i * y ** j
        return out

    def gradient(self, pts):
        x, y = pts[..., 0], pts[..., 1]
        gx = np.zeros(x.shape)
        gy = np.zeros(x.shape)
        for i, j, c in self.coeffs:
            if i:
                gx = gx + c * i * x ** (i - 1) * y ** j
            if j:
                gy = gy + c * j * x ** i * y ** (j - 1)
        return np.stack([gx, gy], axis=-1)

    def hessian(self, pts):
        x, y = pts[..., 0], pts[..., 1]
        H = np.zeros(x.shape + (2, 2))
        for i, j, c in self.coeffs:
            if i > 1:
                H[..., 0, 0] += c * i * (i - 1) * x ** (i - 2) * y ** j
            if j > 1:
                H[..., 1, 1] += c * j * (j - 1) * x ** i * y ** (j - 2)
            if i and j:
                H[..., 0, 1] += c * i * j * x ** (i - 1) * y ** (j - 1)
        H[..., 1, 0] = H[..., 0, 1]
        return H

    def field(self, pts) -> np.ndarray:
        """``H0 = (-d_y psi, d_x psi)``."""
        return self.gradient(np.asarray(pts, dtype=float)) @ LAMBDA.T

    def field_gradient(self, pts) -> np.ndarray:
        """``(grad H0)_ij = d_j H0^i``."""
        return np.einsum("ik,...kj->...ij", LAMBDA, self.hessian(np.asarray(pts, dtype=float)))

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for _, _, c in self.coeffs)


def build_H0(stream_h: DiscreteField) -> DiscreteField:
    """``H0 = (-d_2 psi, d_1 psi)`` from a P2 stream function (recovered gradient)."""
    if stream_h.space != "P2-scalar":
        raise ValidationError("magnetic stream must be a P2-scalar field")
    g = stream_h.mesh.recovered_gradient(stream_h.dofs)
    return DiscreteField.from_nodal(stream_h.mesh, "P2-vector", g @ LAMBDA.T)


# --- stream profiles ----------------------------------------------------------

def smooth_blend(x, upper: float = 1.0):
    """C4 smoothstep, 0 for ``x <= 0`` and 1 at ``x = 1``; returns (S, S', S'').

    Past ``x = 1`` the polynomial is continued up to ``upper`` (and frozen
    beyond), so ``upper > 1`` gives a function that is smooth across 1.
    Four vanishing derivatives at both ends keep ``Lap u0`` continuous.
    """
    x = np.clip(x, 0.0, upper)
    s = x ** 5 * (126 + x * (-420 + x * (540 + x * (-315 + 70 * x))))
    ds = 630 * x ** 4 * (1 - x) ** 4
    d2s = 2520 * x ** 3 * (1 - x) ** 3 * (1 - 2 * x)
    return s, ds, d2s


@dataclass(frozen=True)
class StreamSpec:
    """Boundary profiles of the velocity stream function.

    Parameters
    ----------
    psi0 : FourierProfile
        Boundary values, a function of the clockwise arc length.
    lambda_max : float
        Half-width of the boundary layer where the quadratic form is used.
    psi2 : callable, optional
        ``psi2(rho, der)``; filled by :func:`build_psi2`.
    positive_arcs : tuple of (rho_start, rho_end), optional
        Arcs where ``psi0' > 0`` is required. ``None`` requires it on the
        whole boundary.
    blend : str
        Interior cutoff profile; only ``"c4"`` (:func:`smooth_blend`) is provided.
    """

    psi0: FourierProfile
    lambda_max: float
    psi2: Callable | None = None
    psi1: FourierProfile | None = None
    positive_arcs: tuple | None = None
    blend: str = "c4"

    def __post_init__(self):
        if self.lambda_max <= 0:
            raise ValidationError("lambda_max must be positive")
        if self.psi1 is not None and (np.any(np.asarray(self.psi1.a)) or np.any(np.asarray(self.psi1.b))
                                      or self.psi1.slope):
            raise ValidationError("psi1 must vanish identically")
        if self.blend != "c4":
            raise ValidationError(f"unknown blend {self.blend!r}")

    def check_positive(self, n: int = 2048) -> None:
        """Raise :class:`CompatibilityFailed` unless ``psi0' > 0`` on the arcs."""
        L = self.psi0.L
        rho = np.arange(n) * L / n
        mask = np.ones(n, dtype=bool)
        if self.positive_arcs is not None:
            mask[:] = False
            for a, b in self.positive_arcs:
                a, b = a % L, b % L
                mask |= ((rho >= a) & (rho <= b)) if a <= b else ((rho >= a) | (rho <= b))
        d = self.psi0(rho[mask], 1)
        if d.size == 0 or np.min(d) <= 0:
            where = rho[mask][np.argmin(d)] if d.size else float("nan")
            raise CompatibilityFailed(
                f"invariant psi0' > 0 violated: min {np.min(d) if d.size else 0:.3g}"
                f" at rho={where:.4g}")

    def with_psi2(self, psi2) -> "StreamSpec":
        return StreamSpec(self.psi0, self.lambda_max, psi2, self.psi1,
                          self.positive_arcs, self.blend)


def boundary_frame_rho(curve: BoundaryCurve, rho):
    """Clockwise tangent ``T``, outward normal ``N`` and ``kappa_rho`` at ``rho``."""
    s = np.mod(curve.length - np.asarray(rho, dtype=float), curve.length)
    t, n, k = frame_at(curve, s)
    return -t, n, -k


@dataclass(eq=False)
class StressBalanceProfile:
    """``psi2(rho) = psi0''(rho) + (T.H0)(H0.N)`` evaluated pointwise.

    Tracing a continuous field on the fly keeps the tangential stress
    balance exact at every boundary point instead of only at sample nodes.
    The first derivative uses a central difference along the boundary; it
    only enters the velocity multiplied by ``lam**2``.
    """

    curve: BoundaryCurve
    psi0: FourierProfile
    field: Callable

    @property
    def L(self) -> float:
        return self.curve.length

    def _stress(self, rho):
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        s = np.mod(self.curve.length - rho, self.curve.length)
        pts = self.curve.evaluate(s)
        Hb = np.asarray(self.field(pts), dtype=float)
        if Hb.shape != pts.shape or not np.all(np.isfinite(Hb)):
            raise TraceFailure("magnetic field trace is not finite on the boundary")
        T, N, _ = boundary_frame_rho(self.curve, rho)
        return np.sum(T * Hb, -1) * np.sum(Hb * N, -1)

    def __call__(self, rho, der: int = 0) -> np.ndarray:
        shape = np.shape(rho)
        if der == 0:
            out = self.psi0(rho, 2) + self._stress(rho).reshape(shape)
        elif der == 1:
            h = 1e-3 * self.curve.length / len(self.curve.nodes)
            r = np.asarray(rho, dtype=float)
            out = self.psi0(rho, 3) + ((self._stress(r + h) - self._stress(r - h)) / (2 * h)).reshape(shape)
        else:
            raise ValueError("only der 0 and 1 are available")
        return out


def build_psi2(curve: BoundaryCurve, psi0: FourierProfile, H0):
    """Second-order normal coefficient solving the tangential stress balance.

    Parameters
    ----------
    H0 : callable or DiscreteField
        Magnetic field; callables map (m, 2) points to (m, 2) values and
        give a pointwise exact profile. Discrete fields are traced at the
        curve nodes and interpolated trigonometrically.

    Returns
    -------
    StressBalanceProfile or FourierProfile
        Callable as ``psi2(rho, der)``.

    Raises
    ------
    TraceFailure
        If ``H0`` cannot be evaluated on the boundary.
    """
    if H0 is None:
        return psi0_second(psi0)
    if not isinstance(H0, DiscreteField):
        prof = StressBalanceProfile(curve, psi0, H0)
        try:
            prof(np.array([0.0]))
        except (TypeError, ValueError, IndexError) as exc:
            raise TraceFailure(f"magnetic field could not be traced to the boundary: {exc}") from exc
        return prof
    n = len(curve.nodes)
    L = curve.length
    rho = np.arange(n) * L / n
    s = np.mod(L - rho, L)
    pts = curve.evaluate(s)
    try:
        Hb = H0.mesh.evaluate_points(H0.nodal(), pts)
    except Exception as exc:
        raise TraceFailure(f"magnetic field could not be traced to the boundary: {exc}") from exc
    if Hb.shape != pts.shape or not np.all(np.isfinite(Hb)):
        raise TraceFailure("magnetic field trace is not finite on the boundary")
    T, N, _ = boundary_frame_rho(curve, rho)
    vals = psi0(rho, 2) + np.sum(T * Hb, -1) * np.sum(Hb * N, -1)
    return FourierProfile.from_samples(vals, L)


def psi0_second(psi0: FourierProfile) -> FourierProfile:
    """``psi0''`` as a profile (the balance without magnetic stress)."""
    w = 2 * np.pi / psi0.L
    k = np.arange(len(psi0.a))
    fac = -(k * w) ** 2
    b = np.zeros(len(psi0.a))
    kb = min(len(psi0.a), len(psi0.b))
    b[:kb] = np.asarray(psi0.b, dtype=float)[:kb]
    return FourierProfile(psi0.L, tuple(np.asarray(psi0.a) * fac), tuple(b * fac), 0.0)


# --- the stream function and its velocity ---------------------------------------

@dataclass(eq=False)
class StreamFunction:
    """Evaluator of ``psi`` and ``u0 = Lambda grad psi`` on the physical domain."""

    curve: BoundaryCurve
    spec: StreamSpec
    psi_c: float = field(default=np.nan)

    def __post_init__(self):
        if self.spec.psi2 is None:
            raise ValidationError("psi2 missing; run build_psi2 first")
        TubularFrame(self.curve, self.spec.lambda_max)  # overlap check
        if np.isnan(self.psi_c):
            rho = np.arange(1024) * self.curve.length / 1024
            self.psi_c = float(np.mean(self.spec.psi0(rho)))

    def feet(self, pts, seeds=None):
        """Foot points (s, lam) on the interior side of the boundary.

        Without seeds, candidates from several nearest nodes are compared
        and the smallest ``|lam|`` with ``lam`` not clearly positive wins.
        This keeps points near a self-contact on their own arc.
        """
        pts = np.atleast_2d(pts)
        if seeds is not None:
            s, lam, _ = foot_points(self.curve, pts, seeds)
            return s, lam
        r, lam, dist = projection_candidates(self.curve, pts, n_seeds=8)
        sigma = 0.05 * self.spec.lambda_max
        score = np.where(lam <= sigma, np.abs(lam), np.inf)
        fallback = np.all(~np.isfinite(score), axis=1)
        score[fallback] = dist[fallback]
        k = np.argmin(score, axis=1)
        rows = np.arange(len(pts))
        return r[rows, k], lam[rows, k]

    def evaluate(self, pts, seeds=None):
        """Return ``psi`` (m,) and ``u0`` (m, 2) at physical points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        s, lam = self.feet(pts, seeds)
        L = self.curve.length
        rho = np.mod(L - s, L)
        lm = self.spec.lambda_max
        inside = np.abs(lam) < lm
        psi = np.full(len(pts), self.psi_c)
        u = np.zeros((len(pts), 2))
        if not np.any(inside):
            return psi, u
        rr, ll = rho[inside], lam[inside]
        p0, d0 = self.spec.psi0(rr), self.spec.psi0(rr, 1)
        p2, d2 = self.spec.psi2(rr), self.spec.psi2(rr, 1)
        # chi(0) = 1 and chi' = chi'' = 0 there, so psi has the boundary
        # values and first two normal derivatives of the quadratic form; the
        # polynomial continues smoothly a little outside the domain
        chi, dchi, _ = smooth_blend(1.0 + ll / lm, upper=1.25)
        dchi = dchi / lm
        bar = p0 + 0.5 * p2 * ll ** 2
        psi_in = self.psi_c + chi * (bar - self.psi_c)
        d_rho = chi * (d0 + 0.5 * d2 * ll ** 2)
        d_lam = dchi * (bar - self.psi_c) + chi * p2 * ll
        T, N, k = boundary_frame_rho(self.curve, rr)
        grad = (d_rho / (1.0 - ll * k))[:, None] * T + d_lam[:, None] * N
        psi[inside] = psi_in
        u[inside] = grad @ LAMBDA.T
        return psi, u


def build_u0(spec: StreamSpec, curve: BoundaryCurve, mesh: ReferenceMesh,
             H0=None, seeds=None) -> DiscreteField:
    """P2 interpolant of the stream velocity on a mesh of the physical domain.

    ``spec.psi2`` is computed from ``H0`` when missing.

    Raises
    ------
    CompatibilityFailed
        If ``psi0'`` is not positive on the required arcs.
    TubularOverlap
        If ``lambda_max >= 1 / max|kappa|``.
    """
    spec.check_positive()
    if spec.psi2 is None:
        spec = spec.with_psi2(build_psi2(curve, spec.psi0, H0))
    sf = StreamFunction(curve, spec)
    _, u = sf.evaluate(mesh.nodes, seeds)
    return DiscreteField.from_nodal(mesh, "P2-vector", u)


# --- physical boundary from the reference boundary ------------------------------

@dataclass(eq=False)
class PhysicalBoundary:
    """Image curve ``P^{-1}(tilde curve)`` with the parameter correspondence."""

    tilde: BoundaryCurve
    curve: BoundaryCurve
    r_table: np.ndarray     # tilde parameters
    s_table: np.ndarray     # matching physical arc length

    def s_of_r(self, r):
        return np.interp(np.mod(r, self.tilde.length), self.r_table, self.s_table)

    def r_of_s(self, s):
        return np.interp(np.mod(s, self.curve.length), self.s_table, self.r_table)


def physical_boundary(tilde: BoundaryCurve, cmap: ConformalMap,
                      n_nodes: int | None = None) -> PhysicalBoundary:
    """Map a normalized reference curve through ``w -> w**2 + alpha``."""
    n = int(n_nodes or 4 * len(tilde.nodes))
    Lt = tilde.length
    m = 16 * n
    r_dense = np.linspace(0.0, Lt, m + 1)
    x, w = np.polynomial.legendre.leggauss(6)
    a, b = r_dense[:-1], r_dense[1:]
    rq = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * x
    beta = as_complex(tilde.evaluate(rq.ravel())).reshape(rq.shape)
    speed = 2 * np.abs(beta) * np.linalg.norm(tilde.evaluate(rq.ravel(), 1), axis=1).reshape(rq.shape)
    seg = 0.5 * (b - a) * (speed @ w)
    s_dense = np.concatenate([[0.0], np.cumsum(seg)])
    L_int = s_dense[-1]
    s_nodes = np.arange(n) * L_int / n
    r_nodes = np.interp(s_nodes, s_dense, r_dense)
    z = as_real(as_complex(tilde.evaluate(r_nodes)) ** 2 + cmap.alpha)
    raw = BoundaryCurve(z, enforce_ccw=False)
    if not raw.orientation:
        raise ValidationError("image of the reference curve is not counterclockwise")
    phys = arclength_normalize(raw, n, passes=1)
    s_table = s_dense * (phys.length / L_int)
    return PhysicalBoundary(tilde, phys, r_dense, s_table)


# --- assembled initial data ------------------------------------------------------

@dataclass(eq=False)
class InitialData:
    """Velocity and magnetic field on the physical domain and their pullbacks.

    ``velocity(pts, seeds)`` and ``magnetic(pts)`` evaluate the continuous
    fields; the ``DiscreteField`` members are their P2 interpolants.
    """

    physical_curve: BoundaryCurve
    velocity: Callable
    magnetic: Callable
    u0: DiscreteField | None = None
    H0: DiscreteField | None = None
    v0_tilde: DiscreteField | None = None
    G0_tilde: DiscreteField | None = None
    stream: StreamFunction | None = None
    magnetic_stream: PolynomialStream | None = None
    boundary: PhysicalBoundary | None = None
    cmap: ConformalMap | None = None

    @classmethod
    def from_functions(cls, curve: BoundaryCurve, u, H=None) -> "InitialData":
        """Wrap plain callables ``u(pts)``, ``H(pts)`` for compatibility checks."""
        H = H if H is not None else (lambda p: np.zeros_like(np.atleast_2d(p), dtype=float))
        return cls(curve, lambda p, seeds=None: np.asarray(u(np.atleast_2d(p)), dtype=float),
                   lambda p: np.asarray(H(np.atleast_2d(p)), dtype=float))


def build_initial_data(tilde_mesh: ReferenceMesh, tilde_curve: BoundaryCurve,
                       cmap: ConformalMap, spec: StreamSpec,
                       h_stream: PolynomialStream | None = None,
                       n_boundary: int | None = None) -> InitialData:
    """Stream velocity and polynomial magnetic field, sampled on both domains.

    The physical mesh is the reference mesh pushed through ``w**2 + alpha``.
    Reference nodes are projected on the physical boundary starting from the
    image of their reference foot point, which keeps points near a contact
    of the image boundary on the correct arc.
    """
    h_stream = h_stream or PolynomialStream()
    pb = physical_boundary(tilde_curve, cmap, n_boundary)
    curve = pb.curve
    spec.check_positive()
    Hf = h_stream.field
    if spec.psi2 is None:
        spec = spec.with_psi2(build_psi2(curve, spec.psi0, Hf))
    sf = StreamFunction(curve, spec)

    beta = tilde_mesh.nodes
    r_t, _, d_t = projection_candidates(tilde_curve, beta, n_seeds=4)
    seeds = pb.s_of_r(r_t[np.arange(len(beta)), np.argmin(d_t, axis=1)])
    x = as_real(as_complex(beta) ** 2 + cmap.alpha)
    _, v_nodes = sf.evaluate(x, seeds)
    G_nodes = Hf(x)

    phys_vertices = as_real(as_complex(tilde_mesh.vertices) ** 2 + cmap.alpha)
    phys_mesh = ReferenceMesh(phys_vertices, tilde_mesh.triangles, tilde_mesh.boundary_loop)
    p_nodes = phys_mesh.nodes
    # physical nodes share indices with reference nodes (midpoints of mapped
    # vertices sit close to mapped midpoints), so the same seeds apply
    _, u_nodes = sf.evaluate(p_nodes, seeds)

    velocity = lambda p, s=None: sf.evaluate(p, s)[1]
    return InitialData(
        physical_curve=curve,
        velocity=velocity,
        magnetic=Hf,
        u0=DiscreteField.from_nodal(phys_mesh, "P2-vector", u_nodes),
        H0=DiscreteField.from_nodal(phys_mesh, "P2-vector", Hf(p_nodes)),
        v0_tilde=DiscreteField.from_nodal(tilde_mesh, "P2-vector", v_nodes),
        G0_tilde=DiscreteField.from_nodal(tilde_mesh, "P2-vector", G_nodes),
        stream=sf,
        magnetic_stream=h_stream,
        boundary=pb,
        cmap=cmap,
    )


def stream_laplacian(init: InitialData, mesh: ReferenceMesh, step: float | None = None) -> np.ndarray:
    """Reference-plane Laplacian of ``v0_tilde`` at quadrature points, (nt, 7, 2).

    ``Lap u0`` comes from central differences of the continuous stream
    velocity in the physical plane; since the map is conformal, dividing
    by ``Q2`` gives the reference-plane Laplacian. Stencil points share the
    foot-point seed of their centre so that points near a self-contact
    stay on their own arc. ``step`` defaults to ``lambda_max / 200``.
    """
    if init.stream is None or init.boundary is None or init.cmap is None:
        raise ValidationError("initial data carry no stream function")
    sf, pb, cmap = init.stream, init.boundary, init.cmap
    d = step or sf.spec.lambda_max / 200.0
    beta = mesh.quad_points.reshape(-1, 2)
    r_t, _, d_t = projection_candidates(pb.tilde, beta, n_seeds=4)
    seeds = pb.s_of_r(r_t[np.arange(len(beta)), np.argmin(d_t, axis=1)])
    x = as_real(as_complex(beta) ** 2 + cmap.alpha)
    lap = -4.0 * sf.evaluate(x, seeds)[1]
    for off in ((d, 0.0), (-d, 0.0), (0.0, d), (0.0, -d)):
        lap += sf.evaluate(x + np.array(off), seeds)[1]
    lap /= d * d
    lap /= q_squared_at(cmap, beta)[:, None]
    return lap.reshape(mesh.quad_points.shape[:2] + (2,))


# --- compatibility -----------------------------------------------------------------

@dataclass
class CompatibilityReport:
    tangential_stress: float
    divergence_u: float
    divergence_H: float
    psi2_residual: float | None
    min_normal_velocity: float
    min_normal_velocity_arcs: float | None
    flux: float
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self):
        out = [
            ("tangential stress balance", self.tangential_stress),
            ("velocity divergence", self.divergence_u),
            ("magnetic divergence", self.divergence_H),
        ]
        if self.psi2_residual is not None:
            out.append(("psi2 stress identity", self.psi2_residual))
        return [(name, val, val < self.tol) for name, val in out]


def _fd_gradient(f, pts, seeds, h):
    """Fourth-order central differences; returns (m, 2, 2) with [i, j] = d_j f^i."""
    m = len(pts)
    G = np.zeros((m, 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        vals = [f(pts + k * e, seeds) for k in (-2, -1, 1, 2)]
        G[:, :, j] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return G


def check_compatibility(data: InitialData, tol: float = 1e-6,
                        fd_step: float | None = None) -> CompatibilityReport:
    """Residuals of the initial compatibility conditions on the physical boundary.

    At every boundary node of ``data.physical_curve`` the velocity gradient
    is approximated by fourth-order central differences of the continuous
    field; the tangential component of
    ``((grad u0 + grad u0^T) + H0 H0^T) n`` and the divergences are
    reported. The report lists failed invariants instead of raising.
    """
    curve = data.physical_curve
    n = len(curve.nodes)
    # midpoints between spline knots: the stencils never straddle a knot,
    # where the third derivative of the spline jumps
    s = (np.arange(n) + 0.5) * curve.length / n
    pts = curve.evaluate(s)
    t, nrm, _ = frame_at(curve, s)
    scale = float(np.ptp(curve.nodes, axis=0).max())
    h = fd_step or 1e-4 * scale
    seeds = s if data.stream is not None else None
    G = _fd_gradient(lambda p, sd: data.velocity(p, sd), pts, seeds, h)
    Hb = data.magnetic(pts)
    S = G + np.swapaxes(G, 1, 2) + Hb[:, :, None] * Hb[:, None, :]
    tang = np.abs(np.einsum("mi,mij,mj->m", t, S, nrm))
    div_u = np.abs(np.trace(G, axis1=1, axis2=2))
    GH = _fd_gradient(lambda p, sd: data.magnetic(p), pts, None, h)
    div_H = np.abs(np.trace(GH, axis1=1, axis2=2))
    ub = data.velocity(pts, seeds)
    un = np.sum(ub * nrm, axis=1)
    w = curve.length / n
    psi2_res = None
    un_arcs = None
    if data.stream is not None:
        spec = data.stream.spec
        L = curve.length
        rho = np.mod(L - s, L)
        T, N, _ = boundary_frame_rho(curve, rho)
        psi2_res = float(np.max(np.abs(
            spec.psi2(rho) - spec.psi0(rho, 2) - np.sum(T * Hb, -1) * np.sum(Hb * N, -1))))
        if spec.positive_arcs is not None:
            mask = np.zeros(n, dtype=bool)
            for a, b in spec.positive_arcs:
                a, b = a % L, b % L
                mask |= ((rho >= a) & (rho <= b)) if a <= b else ((rho >= a) | (rho <= b))
            un_arcs = float(un[mask].min()) if np.any(mask) else None
    rep = CompatibilityReport(
        tangential_stress=float(tang.max()),
        divergence_u=float(div_u.max()),
        divergence_H=float(div_H.max()),
        psi2_residual=psi2_res,
        min_normal_velocity=float(un.min()),
        min_normal_velocity_arcs=un_arcs,
        flux=float(np.sum(un) * w),
        tol=tol,
    )
    rep.failures = [name for name, _, ok in rep.lines() if not ok]
    return rep


# --- reference profiles for the iteration ------------------------------------------

@dataclass(eq=False)
class PhiProfile:
    """Affine-in-time reference velocity ``phi(t) = v0 + t * phi_hat`` (nodal)."""

    v0: np.ndarray      # (nn, 2)
    phi_hat: np.ndarray  # (nn, 2)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.v0 + t[..., None, None] * self.phi_hat if t.ndim else self.v0 + float(t) * self.phi_hat

    def series(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return self.v0[None] + times[:, None, None] * self.phi_hat[None]


@dataclass
class PhiInfo:
    tangential_bc_residual: float
    boundary_value_range: tuple


def _nodal_vector(f: DiscreteField) -> np.ndarray:
    if f.space != "P2-vector":
        raise ValidationError("expected a P2-vector field")
    return f.nodal()


def build_phi_qphi(v0t: DiscreteField, G0t: DiscreteField, cmap: ConformalMap,
                   mesh: ReferenceMesh | None = None, lap_v0: np.ndarray | None = None):
    """Reference pressure and affine reference velocity on the fixed domain.

    The pressure solves ``-Q2 Lap q = Tr(grad v0 J grad v0 J) - Tr(grad G0 J grad G0 J)``
    with Dirichlet data from projecting the boundary stress
    ``S m = (grad v0 J + (grad v0 J)^T + G0 G0^T) m`` onto ``m = J^{-1} n0``.
    Then ``phi_hat = Q2 Lap v0 - J^T grad q + grad G0 J G0`` is projected onto
    P2 with weight ``1/Q2``. ``lap_v0`` (quad values, see
    :func:`stream_laplacian`) replaces the recovered Laplacian of ``v0``,
    which converges poorly near the boundary.

    Returns
    -------
    phi : PhiProfile
    q_phi : DiscreteField (P2-scalar)
    info : PhiInfo
        Includes the tangential part of ``S m`` left over by the projection.
    """
    mesh = mesh or v0t.mesh
    v = _nodal_vector(v0t)
    G = _nodal_vector(G0t)
    xq = mesh.quad_points
    Jq = jacobian_at(cmap, xq)
    Q2q = q_squared_at(cmap, xq)
    gv = mesh.grad_at_quad(v)   # (nt, q, 2, 2)
    gG = mesh.grad_at_quad(G)
    A = gv @ Jq
    B = gG @ Jq
    rhs_q = np.trace(A @ A, axis1=-2, axis2=-1) - np.trace(B @ B, axis1=-2, axis2=-1)

    # boundary values
    bn = mesh.boundary_p2_loop
    gv_n = mesh.recovered_gradient(v)[bn]
    Jb = jacobian_at(cmap, mesh.nodes[bn])
    Jib = jacobian_inverse_at(cmap, mesh.nodes[bn])
    Gb = G[bn]
    m = np.einsum("bij,bj->bi", Jib, mesh.boundary_normals)
    Ab = gv_n @ Jb
    S = Ab + np.swapaxes(Ab, 1, 2) + Gb[:, :, None] * Gb[:, None, :]
    Sm = np.einsum("bij,bj->bi", S, m)
    mm = np.sum(m * m, axis=1)
    qb = np.sum(m * Sm, axis=1) / mm
    tang = np.linalg.norm(Sm - qb[:, None] * m, axis=1) / np.sqrt(mm)

    q = _dirichlet_poisson(mesh, rhs_q / Q2q, bn, qb)

    if lap_v0 is None:
        lap_q = mesh.at_quad(np.stack([mesh.recovered_laplacian(v[:, i]) for i in range(2)], axis=1))
    else:
        lap_q = lap_v0
    gq = mesh.grad_at_quad(q)
    phat_q = Q2q[..., None] * lap_q - np.einsum("tqki,tqk->tqi", Jq, gq) \
        + np.einsum("tqij,tqj->tqi", B, mesh.at_quad(G))
    phi_hat = weighted_projection(mesh, phat_q, 1.0 / Q2q)
    info = PhiInfo(float(tang.max()) if len(tang) else 0.0,
                   (float(qb.min()), float(qb.max())) if len(qb) else (0.0, 0.0))
    return PhiProfile(v.copy(), phi_hat), DiscreteField(mesh, "P2-scalar", q), info


def weighted_projection(mesh: ReferenceMesh, quad_vals: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Solve ``M_w x = int w f phi`` per component for quad values ``f``."""
    key = ("wmass_lu", hash(weight.tobytes()))
    lu = mesh.cache.get(key)
    if lu is None:
        lu = spla.splu(mesh.mass_matrix("P2-scalar", weight).tocsc())
        mesh.cache[key] = lu
    flat = quad_vals.reshape(quad_vals.shape[:2] + (-1,))
    loc = np.einsum("tq,qa,tqk->tak", mesh.quad_weights * weight, mesh.p2_values, flat)
    rhs = np.zeros((mesh.n_nodes, flat.shape[-1]))
    np.add.at(rhs, mesh.tri6.ravel(), loc.reshape(-1, flat.shape[-1]))
    return lu.solve(rhs).reshape((mesh.n_nodes,) + quad_vals.shape[2:])


def _dirichlet_poisson(mesh: ReferenceMesh, f_quad: np.ndarray, bnodes, bvals) -> np.ndarray:
    """P2 solve of ``-Lap q = f`` with ``q = bvals`` on ``bnodes``."""
    K = mesh.stiffness_matrix().tocsr()
    n = mesh.n_nodes
    loc = np.einsum("tq,qa,tq->ta", mesh.quad_weights, mesh.p2_values, f_quad)
    rhs = np.zeros(n)
    np.add.at(rhs, mesh.tri6.ravel(), loc.ravel())
    q = np.zeros(n)
    q[bnodes] = bvals
    free = np.setdiff1d(np.arange(n), bnodes)
    if len(free) == 0:
        return q
    Kff = K[free][:, free].tocsc()
    b = rhs[free] - K[free][:, bnodes] @ bvals
    try:
        q[free] = spla.spsolve(Kff, b)
    except Exception as exc:
        raise EllipticSolveFailed(f"pressure reference solve failed: {exc}") from exc
    if not np.all(np.isfinite(q)):
        raise EllipticSolveFailed("pressure reference solve produced non-finite values")
    return q
