"""Exact 2D Clifford/spinor algebra on the real rank-4 spinor fiber.

The fiber is R^4, identified with C^2 (each complex entry a 2x2 real
block).  The generators are the real images of i*sigma_1 and i*sigma_2,
so gamma(v)^2 = -|v|^2 exactly and both generators are orthogonal and
skew-symmetric for the Euclidean spin inner product.  All operations
here are exact matrix algebra; no tolerances.

Conventions for tensor fields: a spinor is an array whose last axis has
length 4; a gravitino fiber is an array whose last two axes are (2, 4),
the leading 2 being the frame index of the tangent leg.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _complex_to_real(m: np.ndarray) -> np.ndarray:
    """Real 4x4 image of a complex 2x2 matrix acting on C^2 ~ R^4."""
    out = np.zeros((4, 4))
    for i in range(2):
        for j in range(2):
            a, b = m[i, j].real, m[i, j].imag
            out[2 * i:2 * i + 2, 2 * j:2 * j + 2] = [[a, -b], [b, a]]
    return out


_SIGMA1 = np.array([[0, 1], [1, 0]], dtype=complex)
_SIGMA2 = np.array([[0, -1j], [1j, 0]], dtype=complex)


@dataclass(frozen=True)
class CliffordRep:
    """Fixed representation: gamma matrices of e1, e2 and the volume element."""

    G1: np.ndarray = field(default_factory=lambda: _complex_to_real(1j * _SIGMA1))
    G2: np.ndarray = field(default_factory=lambda: _complex_to_real(1j * _SIGMA2))

    @property
    def W(self) -> np.ndarray:
        """Volume element omega = e1 . e2."""
        return self.G1 @ self.G2

    def gamma(self, alpha: int) -> np.ndarray:
        return (self.G1, self.G2)[alpha]


REP = CliffordRep()
G1 = REP.G1
G2 = REP.G2
W = REP.W
# Products gamma(e_a) gamma(e_b), used by the supercurrent and V-field.
GG = np.array([[G1 @ G1, G1 @ G2], [G2 @ G1, G2 @ G2]])


def gamma_apply(v, s):
    """Clifford action (v^1 e1 + v^2 e2) . s; linear in v and s.

    ``v`` has shape (..., 2) and ``s`` shape (..., 4); both broadcast.
    """
    v = np.asarray(v, dtype=float)
    s = np.asarray(s, dtype=float)
    return (v[..., 0, None] * np.einsum("ab,...b->...a", G1, s)
            + v[..., 1, None] * np.einsum("ab,...b->...a", G2, s))


def omega_apply(s):
    """Action of the volume element omega = e1 . e2."""
    return np.einsum("ab,...b->...a", W, np.asarray(s, dtype=float))


def spin_inner(s, t):
    """Fiberwise real spin metric (Euclidean in this representation)."""
    return np.einsum("...a,...a->...", np.asarray(s, float), np.asarray(t, float))


def delta_gamma(chi):
    """Clifford contraction S (x) TM -> S:  chi -> e_alpha . chi^alpha."""
    chi = np.asarray(chi, dtype=float)
    return (np.einsum("ab,...b->...a", G1, chi[..., 0, :])
            + np.einsum("ab,...b->...a", G2, chi[..., 1, :]))


def q_project(chi):
    """Projection onto ker(delta_gamma) inside S (x) TM.

    Q chi = 1/2 ((chi^1 + w.chi^2) (x) e1 - w.(chi^1 + w.chi^2) (x) e2).
    Idempotent; delta_gamma o q_project = 0.
    """
    chi = np.asarray(chi, dtype=float)
    q1 = 0.5 * (chi[..., 0, :] + omega_apply(chi[..., 1, :]))
    q2 = -omega_apply(q1)
    return np.stack([q1, q2], axis=-2)


def q_norm2(chi):
    """|Q chi|^2 on orthonormal frames."""
    q = q_project(chi)
    return np.einsum("...ia,...ia->...", q, q)
