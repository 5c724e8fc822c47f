"""Geometry of the embedded target N in R^K (round spheres and ellipsoids).

Both targets are level sets of F(w) = sum_i w_i^2 / a_i^2 - 1, so all
geometry derives from the diagonal D = diag(1/a_i^2): unit normal
n = D p / |D p|, scalar second fundamental form b(X, Y) = X^T B Y with
B = -P D P / |D p|, and the Gauss-equation curvature assembled from B.

Sign convention: A(X, Y) = b(X, Y) n is the normal part of the ambient
directional derivative, so the map equation reads
Delta phi = A(grad phi, grad phi) + ...  with Delta = d_xx + d_yy
(on the unit sphere A(X, Y) = -<X, Y> p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePoint, NotTangent

_TANGENT_TOL = 1e-10


@dataclass(frozen=True)
class TargetGeometry:
    """Embedded quadric target, codimension 1 in R^K."""

    semi_axes: np.ndarray
    kind: str = "ellipsoid"

    def __post_init__(self):
        axes = np.asarray(self.semi_axes, dtype=float)
        if axes.ndim != 1 or axes.size < 2 or np.any(axes <= 0):
            raise ValueError("semi_axes must be a positive vector, K >= 2")
        object.__setattr__(self, "semi_axes", axes)

    @property
    def K(self) -> int:
        return self.semi_axes.size

    @property
    def is_round(self) -> bool:
        a = self.semi_axes
        return bool(np.allclose(a, a[0], rtol=0, atol=1e-13))

    @property
    def _d(self) -> np.ndarray:
        return 1.0 / self.semi_axes**2

    # -- projections ---------------------------------------------------

    def closest_point(self, w):
        """Nearest point on N; Newton on the Lagrange condition for ellipsoids."""
        w = np.asarray(w, dtype=float)
        if self.is_round:
            rho = self.semi_axes[0]
            nrm = np.sqrt(np.einsum("...i,...i->...", w, w))
            if np.any(nrm < 1e-8):
                raise DegeneratePoint("ambient point at the center of the sphere")
            return w * (rho / nrm)[..., None]
        return self._closest_point_ellipsoid(w)

    def _closest_point_ellipsoid(self, w):
        # p_i = w_i / (1 + t d_i) with f(t) = sum d_i p_i^2 - 1 = 0.
        # f is decreasing for t > -min(a^2); Newton from a safe start,
        # clamped to keep all 1 + t d_i positive.
        d = self._d
        w = np.asarray(w, dtype=float)
        t_min = -np.min(self.semi_axes) ** 2
        t = np.zeros(w.shape[:-1])
        lo = np.full_like(t, t_min * (1 - 1e-12))
        for _ in range(100):
            q = 1.0 + t[..., None] * d
            if np.any(q <= 0):  # pragma: no cover - clamped below
                raise DegeneratePoint("projection left the tubular neighborhood")
            p = w / q
            f = np.einsum("i,...i->...", d, p**2) - 1.0
            df = -2.0 * np.einsum("i,...i->...", d**2, p**2 / q)
            step = f / df
            t_new = t - step
            t_new = np.maximum(t_new, 0.5 * (t + lo))
            if np.max(np.abs(t_new - t)) < 1e-15 * (1 + np.max(np.abs(t))):
                t = t_new
                break
            t = t_new
        q = 1.0 + t[..., None] * d
        p = w / q
        res = np.abs(np.einsum("i,...i->...", d, p**2) - 1.0)
        if np.max(res) > 1e-9:
            raise DegeneratePoint("ellipsoid projection did not converge")
        return p

    def unit_normal(self, p):
        p = np.asarray(p, dtype=float)
        nu = p * self._d
        nrm = np.sqrt(np.einsum("...i,...i->...", nu, nu))
        return nu / nrm[..., None]

    def tangent_project(self, p, w):
        """Orthogonal projection of ambient w onto T_p N."""
        n = self.unit_normal(p)
        return np.asarray(w, float) - n * np.einsum("...i,...i->...", n, w)[..., None]

    def _check_tangent(self, p, *vecs):
        for v in vecs:
            if np.max(np.abs(self.tangent_project(p, v) - v)) > _TANGENT_TOL:
                raise NotTangent("input vector is not tangent at p")

    # -- second fundamental form and curvature -------------------------

    def bform(self, p):
        """Matrix B with A(X, Y) = (X^T B Y) n; B = -P D P / |D p|."""
        p = np.asarray(p, dtype=float)
        d = self._d
        dp = p * d
        nd = np.sqrt(np.einsum("...i,...i->...", dp, dp))
        n = dp / nd[..., None]
        eye = np.eye(self.K)
        proj = eye - np.einsum("...i,...j->...ij", n, n)
        pdp = np.einsum("...ij,j,...jk->...ik", proj, d, proj)
        return -pdp / nd[..., None, None]

    def second_fundamental_form(self, p, x, y):
        """Normal-valued A(p)(X, Y), symmetric and bilinear."""
        self._check_tangent(p, x, y)
        b = self.bform(p)
        val = np.einsum("...i,...ij,...j->...", x, b, y)
        return val[..., None] * self.unit_normal(p)

    def shape_vector(self, p, x):
        """Tangent vector S(X) with <S(X), Y> = b(X, Y)."""
        return np.einsum("...ij,...j->...i", self.bform(p), np.asarray(x, float))

    def curvature(self, p, x, y, z):
        """Gauss-equation curvature R(X, Y)Z = b(Y,Z) S(X) - b(X,Z) S(Y)."""
        self._check_tangent(p, x, y, z)
        b = self.bform(p)
        byz = np.einsum("...i,...ij,...j->...", y, b, z)
        bxz = np.einsum("...i,...ij,...j->...", x, b, z)
        return (byz[..., None] * np.einsum("...ij,...j->...i", b, x)
                - bxz[..., None] * np.einsum("...ij,...j->...i", b, y))

    # -- covariant derivative of A (finite differences) ----------------

    def _bform_scalar_transported(self, p, x, y, z, t):
        """b at Pi(p + t x) applied to tangent-projected transports of y, z."""
        c = self.closest_point(p + t * x)
        yt = self.tangent_project(c, y)
        zt = self.tangent_project(c, z)
        b = self.bform(c)
        return np.einsum("...i,...ij,...j->...", yt, b, zt)

    def nabla_a_scalar(self, p, x, y, z, step: float = 1e-4):
        """(nabla_X a)(Y, Z): centered differences + Richardson along a
        geodesic-to-second-order curve through p with velocity X.

        Short-circuits only for targets declared as round spheres; a round
        ellipsoid exercises the numeric path (and should return ~0).
        """
        if self.kind == "sphere" and self.is_round:
            return np.zeros(np.asarray(p, float).shape[:-1])

        def slope(t):
            return (self._bform_scalar_transported(p, x, y, z, t)
                    - self._bform_scalar_transported(p, x, y, z, -t)) / (2 * t)

        d1 = slope(step)
        d2 = slope(step / 2)
        return (4 * d2 - d1) / 3

    def nabla_A(self, p, x, y, z):
        """Covariant derivative (nabla_X A)(Y, Z), normal-valued.

        The normal line is parallel (nabla^perp n = 0 for level sets),
        so only the scalar coefficient is differentiated.
        """
        self._check_tangent(p, x, y, z)
        return self.nabla_a_scalar(p, x, y, z)[..., None] * self.unit_normal(p)


def sphere(K: int = 3, radius: float = 1.0) -> TargetGeometry:
    return TargetGeometry(np.full(K, float(radius)), kind="sphere")


def ellipsoid(*semi_axes: float) -> TargetGeometry:
    return TargetGeometry(np.asarray(semi_axes, dtype=float), kind="ellipsoid")
