"""Branch-cut aware square-root map and the matrix fields derived from it.

The forward map ``P(z) = sqrt(z - alpha)`` sends the physical plane minus a
cut ``Gamma`` to the "tilde" plane; its inverse ``P^{-1}(w) = w**2 + alpha`` is
entire. Everything the solver needs downstream lives on the tilde side,
where ``dP/dz`` evaluated at ``P^{-1}(beta)`` equals ``1 / (2 beta)``
regardless of the branch. The real 2x2 representation of that complex
number is the Jacobian field ``J``; ``Q2 = |dP/dz|^2 = det J``.

Vectorised helpers accept either complex arrays or real arrays whose last
axis has length 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PointOnBranchCut

# rotation by +pi/2
LAMBDA = np.array([[0.0, -1.0], [1.0, 0.0]])


def as_complex(p) -> np.ndarray:
    """Convert complex input or (..., 2) real input to a complex array."""
    p = np.asarray(p)
    if np.iscomplexobj(p):
        return p.astype(complex)
    if p.shape and p.shape[-1] == 2:
        return p[..., 0] + 1j * p[..., 1]
    return p.astype(complex)


def as_real(z) -> np.ndarray:
    """Complex array to (..., 2) real array."""
    z = np.asarray(z, dtype=complex)
    return np.stack([z.real, z.imag], axis=-1)


def complex_to_matrix(c) -> np.ndarray:
    """Real 2x2 matrix of multiplication by the complex number(s) ``c``."""
    c = np.asarray(c, dtype=complex)
    out = np.empty(c.shape + (2, 2))
    out[..., 0, 0] = c.real
    out[..., 0, 1] = -c.imag
    out[..., 1, 0] = c.imag
    out[..., 1, 1] = c.real
    return out


@dataclass(frozen=True)
class ConformalMap:
    """Descriptor of ``P(z) = sqrt(z - alpha)`` with an explicit cut.

    Parameters
    ----------
    alpha : complex
        Branch point.
    branch_cut : tuple of complex, optional
        Polyline vertices of the cut, starting at ``alpha``. The last
        segment is continued to infinity as a ray. Defaults to the
        downward vertical ray from ``alpha``.
    scale : float
        Domain diameter; the on-cut tolerance is ``1e-10 * scale``.
    branch_selector : {"cut", "ray"}
        ``"cut"`` chooses the branch continuous off the full polyline;
        ``"ray"`` only honours the direction of its last segment.
        Curve mapping always tracks the sign sample to sample.
    """

    alpha: complex = 0j
    branch_cut: tuple = field(default=())
    scale: float = 1.0
    branch_selector: str = "cut"

    def __post_init__(self):
        a = complex(self.alpha)
        object.__setattr__(self, "alpha", a)
        cut = tuple(complex(v) for v in self.branch_cut) or (a, a - 1j)
        if len(cut) < 2:
            raise ValueError("branch_cut needs at least two vertices")
        if abs(cut[0] - a) > 1e-12 * max(1.0, abs(a)):
            raise ValueError("branch_cut must start at alpha")
        if abs(cut[-1] - cut[-2]) == 0:
            raise ValueError("last branch_cut segment is degenerate")
        object.__setattr__(self, "branch_cut", cut)
        if self.branch_selector not in ("cut", "ray"):
            raise ValueError(f"unknown branch_selector {self.branch_selector!r}")

    @property
    def tol(self) -> float:
        return 1e-10 * self.scale

    @property
    def ray_direction(self) -> complex:
        d = self.branch_cut[-1] - self.branch_cut[-2]
        return d / abs(d)


def distance_to_cut(m: ConformalMap, z) -> np.ndarray:
    """Euclidean distance from ``z`` to the cut (segments plus final ray)."""
    z = as_complex(z)
    verts = np.asarray(m.branch_cut)
    best = np.full(z.shape, np.inf)
    for a, b in zip(verts[:-1], verts[1:]):
        d = b - a
        tau = np.clip(((z - a) * np.conj(d)).real / abs(d) ** 2, 0.0, 1.0)
        best = np.minimum(best, np.abs(z - (a + tau * d)))
    a, d = verts[-1], m.ray_direction
    tau = np.maximum(((z - a) * np.conj(d)).real, 0.0)
    return np.minimum(best, np.abs(z - (a + tau * d)))


def _ray_hits(z, d_probe, p, d):
    # probe ray z + s*d_probe (s>0) against ray p + u*d (u>0); d_probe = i*d
    rel = p - z
    s = (rel * np.conj(d_probe)).real
    u = -(rel * np.conj(d)).real
    return (s > 0) & (u > 0)


def _segment_hits(z, d_probe, a, b):
    e = b - a
    # solve z + s*d_probe = a + t*e
    det = (d_probe.real * (-e.imag) - d_probe.imag * (-e.real))
    if abs(det) < 1e-300:
        return np.zeros(np.shape(z), dtype=bool)
    rel = a - z
    s = (rel.real * (-e.imag) - rel.imag * (-e.real)) / det
    t = (d_probe.real * rel.imag - d_probe.imag * rel.real) / det
    return (s > 0) & (t >= 0) & (t < 1)


def _sheet_parity(m: ConformalMap, z) -> np.ndarray:
    """1 where the cut-adapted branch differs from the straight-ray branch."""
    z = np.asarray(z, dtype=complex)
    verts = np.asarray(m.branch_cut)
    d = m.ray_direction
    probe = 1j * d
    count = np.zeros(z.shape, dtype=int)
    for a, b in zip(verts[:-1], verts[1:]):
        count += _segment_hits(z, probe, a, b)
    count += _ray_hits(z, probe, verts[-1], d)
    count += _ray_hits(z, probe, verts[0], d)
    return count % 2


def principal_branch(m: ConformalMap, z) -> np.ndarray:
    """``sqrt(z - alpha)`` continuous off the configured cut."""
    z = as_complex(z)
    theta = np.angle(m.ray_direction) + np.pi
    rot = np.exp(1j * theta)
    w = np.exp(0.5j * theta) * np.sqrt((z - m.alpha) / rot)
    if len(m.branch_cut) > 2 and m.branch_selector == "cut":
        w = np.where(_sheet_parity(m, z) == 1, -w, w)
    return w


def _check_off_cut(m, z, allow=None):
    dist = distance_to_cut(m, z)
    bad = dist < m.tol
    if allow is not None:
        bad &= ~allow
    if np.any(bad):
        loc = np.asarray(z).ravel()[np.flatnonzero(np.ravel(bad))[0]]
        raise PointOnBranchCut(
            f"point {loc:.6g} lies within {m.tol:.1e} of the branch cut", loc)


def map_point(m: ConformalMap, z):
    """Forward map ``w = sqrt(z - alpha)`` on the cut-adapted branch.

    Raises
    ------
    PointOnBranchCut
        If any input point is within ``m.tol`` of the cut.
    """
    zc = as_complex(z)
    _check_off_cut(m, zc)
    w = principal_branch(m, zc)
    return complex(w) if np.ndim(w) == 0 else w


def inverse_point(m: ConformalMap, w):
    """Inverse map ``w**2 + alpha`` (entire, no branch issues)."""
    wc = as_complex(w)
    z = wc * wc + m.alpha
    return complex(z) if np.ndim(z) == 0 else z


def _check_branch_point(m, beta):
    if np.any(np.abs(beta) < m.tol):
        raise PointOnBranchCut("Jacobian requested at the branch point", 0j)


def derivative_at(m: ConformalMap, beta) -> np.ndarray:
    """Complex ``dP/dz`` composed with ``P^{-1}``, i.e. ``1/(2 beta)``.

    The tilde point ``beta`` already selects the sheet, so the value is
    single valued away from ``beta = 0`` and the cut never enters.
    """
    b = as_complex(beta)
    _check_branch_point(m, b)
    return 0.5 / b


def jacobian_at(m: ConformalMap, beta) -> np.ndarray:
    """``J_{kj}(beta) = (d_j P^k)(P^{-1}(beta))`` as a (..., 2, 2) array."""
    return complex_to_matrix(derivative_at(m, beta))


def jacobian_inverse_at(m: ConformalMap, beta) -> np.ndarray:
    """``J(beta)^{-1} = [[2 b1, -2 b2], [2 b2, 2 b1]]``."""
    b = as_complex(beta)
    _check_branch_point(m, b)
    return complex_to_matrix(2.0 * b)


def jacobian_grad_at(m: ConformalMap, beta) -> np.ndarray:
    """Derivatives ``out[..., i, j, k] = d_k J_ij`` of the Jacobian field.

    ``d_1`` and ``d_2`` of the holomorphic symbol ``c = 1/(2 beta)`` are
    ``c'`` and ``i c'`` with ``c' = -1/(2 beta^2)``.
    """
    b = as_complex(beta)
    _check_branch_point(m, b)
    dc = -0.5 / (b * b)
    return np.stack([complex_to_matrix(dc), complex_to_matrix(1j * dc)], axis=-1)


def q_squared_at(m: ConformalMap, beta) -> np.ndarray:
    """Conformal factor ``|dP/dz|^2`` at ``P^{-1}(beta)``."""
    c = derivative_at(m, beta)
    q2 = (c * np.conj(c)).real
    return float(q2) if np.ndim(q2) == 0 else q2


def lambda_gradient(A: np.ndarray) -> np.ndarray:
    """``-Lambda A Lambda`` for a stack of 2x2 matrices (cofactor transpose)."""
    return -np.einsum("ij,...jk,kl->...il", LAMBDA, A, LAMBDA)


def mapped_normal(J: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Normal transported by ``-Lambda J Lambda`` (unnormalised)."""
    return np.einsum("...ij,...j->...i", lambda_gradient(J), n)


def map_polyline(m: ConformalMap, pts, direction: str = "inverse",
                 allow_endpoint_contact: bool = False) -> np.ndarray:
    """Map an ordered point list, tracking the branch continuously.

    Parameters
    ----------
    pts : array_like, shape (n, 2) or complex (n,)
    direction : {"forward", "inverse"}
    allow_endpoint_contact : bool
        Accept the first and last node on the cut (arcs that end at the
        branch point).

    Returns
    -------
    ndarray, shape (n, 2)
    """
    z = as_complex(pts).ravel()
    if direction == "inverse":
        return as_real(z * z + m.alpha)
    if direction != "forward":
        raise ValueError(f"unknown direction {direction!r}")
    allow = None
    if allow_endpoint_contact:
        allow = np.zeros(z.shape, dtype=bool)
        allow[[0, -1]] = True
    _check_off_cut(m, z, allow)
    root = np.sqrt(z - m.alpha)
    out = np.empty_like(root)
    out[0] = principal_branch(m, z[:1])[0]
    for k in range(1, len(z)):
        r = root[k]
        out[k] = r if abs(r - out[k - 1]) <= abs(r + out[k - 1]) else -r
    return as_real(out)


def map_curve(m: ConformalMap, c, direction: str = "inverse", n_nodes=None):
    """Image of a closed curve, resampled to uniform arc length.

    Parameters
    ----------
    c : BoundaryCurve
    direction : {"forward", "inverse"}
    n_nodes : int, optional
        Node count of the resampled image (defaults to that of ``c``).
    """
    from .geometry import BoundaryCurve, arclength_normalize

    img = map_polyline(m, c.nodes, direction)
    return arclength_normalize(BoundaryCurve(img), n_nodes or len(c.nodes))
