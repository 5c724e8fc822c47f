"""Field containers and the pointwise/integral evaluations of the model:
action, energies, twisted Dirac operator, curvature spinor terms,
Euler-Lagrange residuals, the V vector fields and the supercurrent.

All fields are stored in the flat-chart trivialization with the
conformal weights absorbed into the field values, so every functional
below is evaluated with flat stencils and the flat measure.  phi has
shape (nx, ny, K), psi (nx, ny, K, 4) with the tangency constraint on
the K index, chi (nx, ny, 2, 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import clifford as cl
from . import grid as gr
from .errors import ConstraintViolated
from .target import TargetGeometry

_CONSTRAINT_TOL = 1e-8


@dataclass
class FieldState:
    chart: gr.Chart
    target: TargetGeometry
    phi: np.ndarray
    psi: np.ndarray
    chi: np.ndarray

    @property
    def K(self) -> int:
        return self.target.K

    def copy(self) -> "FieldState":
        return FieldState(self.chart, self.target, self.phi.copy(),
                          self.psi.copy(), self.chi.copy())

    def project(self) -> "FieldState":
        """Enforce phi on N and psi tangent along phi (masked nodes untouched)."""
        m = self.chart.mask
        phi = self.phi.copy()
        phi[m] = self.target.closest_point(self.phi[m])
        psi = self.psi.copy()
        n = self.target.unit_normal(phi[m])
        coef = np.einsum("pk,pkc->pc", n, psi[m])
        psi[m] = psi[m] - n[:, :, None] * coef[:, None, :]
        return FieldState(self.chart, self.target, phi, psi, self.chi)

    def constraint_defect(self) -> float:
        m = self.chart.mask
        p = self.target.closest_point(self.phi[m])
        d1 = np.max(np.abs(p - self.phi[m])) if m.any() else 0.0
        n = self.target.unit_normal(p)
        d2 = np.max(np.abs(np.einsum("pk,pkc->pc", n, self.psi[m]))) if m.any() else 0.0
        return float(max(d1, d2))

    def require_constraints(self) -> None:
        d = self.constraint_defect()
        if d > _CONSTRAINT_TOL:
            raise ConstraintViolated(f"field constraints violated by {d:.3e}")


# -- pointwise geometry caches -------------------------------------------


def _geom(state: FieldState):
    """(normal, B) fields of the target along phi, zero off-mask."""
    m = state.chart.mask
    K = state.K
    n = np.zeros(m.shape + (K,))
    B = np.zeros(m.shape + (K, K))
    n[m] = state.target.unit_normal(state.phi[m])
    B[m] = state.target.bform(state.phi[m])
    return n, B


def q_chi(state: FieldState) -> np.ndarray:
    return cl.q_project(state.chi)


def q_chi_norm2(state: FieldState) -> np.ndarray:
    return cl.q_norm2(state.chi)


def twisted_gradient(state: FieldState) -> np.ndarray:
    """nabla~_alpha psi = d_alpha psi - A(phi_* e_alpha, psi); axis 2 is alpha."""
    dphi = gr.grad(state.chart, state.phi)
    dpsi = gr.grad(state.chart, state.psi, spin=True)
    n, B = _geom(state)
    bp = np.einsum("xyjk,xyak->xyaj", B, dphi)
    coef = np.einsum("xyaj,xyjc->xyac", bp, state.psi)
    return dpsi - n[:, :, None, :, None] * coef[:, :, :, None, :]


def dirac(state: FieldState) -> np.ndarray:
    """Twisted Dirac operator gamma(e_alpha) nabla~_alpha psi, tangent-valued
    up to discretization."""
    state.require_constraints()
    tg = twisted_gradient(state)
    return (np.einsum("ab,xyib->xyia", cl.G1, tg[:, :, 0])
            + np.einsum("ab,xyib->xyia", cl.G2, tg[:, :, 1]))


@dataclass
class SpinorCurvatureTerms:
    SR: np.ndarray        # (nx, ny, K, 4)
    Rm_scalar: np.ndarray  # (nx, ny)
    SnablaR: np.ndarray   # (nx, ny, K)


def _gram(psi: np.ndarray) -> np.ndarray:
    return np.einsum("xyic,xyjc->xyij", psi, psi)


def spinor_curvature(psi: np.ndarray, B: np.ndarray):
    """SR(psi) and Rm(psi) from the Gauss-equation curvature:
    SR^i = tr(BG) (B psi)^i - (B G B psi)^i with G the spinor Gram matrix."""
    G = _gram(psi)
    Bpsi = np.einsum("xyik,xykc->xyic", B, psi)
    trBG = np.einsum("xyij,xyij->xy", B, G)
    GBpsi = np.einsum("xylj,xyjc->xylc", G, Bpsi)
    BGBpsi = np.einsum("xyil,xylc->xyic", B, GBpsi)
    SR = trBG[..., None, None] * Bpsi - BGBpsi
    Rm = np.einsum("xyic,xyic->xy", SR, psi)
    return SR, Rm


def _nabla_b_tensor(state: FieldState) -> np.ndarray:
    """C[m,a,b] = (nabla_{P e_m} a-form)(P e_a, P e_b) per node, by the same
    transported finite differences as TargetGeometry.nabla_A (round
    spheres short-circuit to zero)."""
    m = state.chart.mask
    K = state.K
    C = np.zeros(m.shape + (K, K, K))
    if state.target.is_round:
        return C
    p = state.phi[m]
    eye = np.eye(K)
    proj = lambda v: state.target.tangent_project(p, np.broadcast_to(v, p.shape))
    basis = [proj(eye[i]) for i in range(K)]
    vals = np.zeros((p.shape[0], K, K, K))
    for i in range(K):
        for a in range(K):
            for b in range(a, K):
                v = state.target.nabla_a_scalar(p, basis[i], basis[a], basis[b])
                vals[:, i, a, b] = v
                vals[:, i, b, a] = v
    C[m] = vals
    return C


def curvature_terms(state: FieldState) -> SpinorCurvatureTerms:
    """SR(psi), Rm(psi) and the contracted curvature-derivative vector
    S-nabla-R(psi) (zero for round spheres)."""
    state.require_constraints()
    _, B = _geom(state)
    SR, Rm = spinor_curvature(state.psi, B)
    G = _gram(state.psi)
    C = _nabla_b_tensor(state)
    if state.target.is_round:
        SnR = np.zeros(state.phi.shape)
    else:
        # Normalization fixed variationally: the phi-derivative of the
        # action term -Rm/6 = -(tr(BG)^2 - tr(BGBG))/6 must equal the
        # -S-nabla-R/12 term of the map equation.
        GBG = np.einsum("xyij,xyjk,xykl->xyil", G, B, G)
        t1 = np.einsum("xymij,xyji->xym", C, GBG)
        t2 = np.einsum("xymij,xyij->xym", C, G) * np.einsum("xyij,xyij->xy", B, G)[..., None]
        SnR = 2.0 * (t2 - t1)
    return SpinorCurvatureTerms(SR=SR, Rm_scalar=Rm, SnablaR=SnR)


def sr_via_gauss(state: FieldState) -> np.ndarray:
    """Cross-check route for the cubic curvature term: contract psi with the
    full R tensor assembled entrywise from second-fundamental-form products
    (the Gauss equation), instead of the factored einsum path."""
    _, B = _geom(state)
    G = _gram(state.psi)
    # R^i_{jkl} = B_{lj} B_{ik} - B_{kj} B_{il}
    R = (np.einsum("xylj,xyik->xyijkl", B, B)
         - np.einsum("xykj,xyil->xyijkl", B, B))
    return np.einsum("xyijkl,xylj,xykc->xyic", R, G, state.psi)


# -- gravitino couplings --------------------------------------------------


def push_q_chi(state: FieldState) -> np.ndarray:
    """(1 (x) phi_*) Q chi as a K-tuple of spinors."""
    dphi = gr.grad(state.chart, state.phi)
    q = q_chi(state)
    return np.einsum("xyai,xyac->xyic", dphi, q)


def v_field(state: FieldState) -> np.ndarray:
    """V^i = <e_a . e_b . chi^a, psi^i> e_b, shape (nx, ny, K, 2)."""
    out = np.zeros(state.psi.shape[:3] + (2,))
    for b in range(2):
        s = np.zeros(state.chi.shape[:2] + (4,))
        for a in range(2):
            s = s + np.einsum("cd,xyd->xyc", cl.GG[a, b], state.chi[:, :, a])
        out[..., b] = np.einsum("xyc,xyic->xyi", s, state.psi)
    return out


def supercurrent(state: FieldState) -> np.ndarray:
    """J^a = 2 <phi_* e_b, e_b . e_a . psi> + |psi|^2 e_b . e_a . chi^b,
    a pair of spinors (nx, ny, 2, 4)."""
    dphi = gr.grad(state.chart, state.phi)
    psi2 = np.einsum("xyic,xyic->xy", state.psi, state.psi)
    out = np.zeros(state.chi.shape)
    for a in range(2):
        acc = np.zeros(state.chi.shape[:2] + (4,))
        for b in range(2):
            acc = acc + 2.0 * np.einsum("xyi,cd,xyid->xyc",
                                        dphi[:, :, b], cl.GG[b, a], state.psi)
            acc = acc + psi2[..., None] * np.einsum("cd,xyd->xyc",
                                                    cl.GG[b, a], state.chi[:, :, b])
        out[:, :, a] = acc
    return out


def supercurrent_norm(state: FieldState) -> float:
    j = supercurrent(state)
    dens = np.einsum("xyac,xyac->xy", j, j)
    return float(np.sqrt(gr.integrate(state.chart, dens, weighted=False)))


def critical_gravitino(state: FieldState, floor: float = 0.0) -> np.ndarray:
    """The gravitino that makes the supercurrent vanish pointwise:
    chi = <phi_* e_b, e_b . e_a . psi> (x) e_a / |psi|^2.  Lies in the
    image of the Q-projection automatically.  ``floor`` regularizes the
    denominator where |psi|^2 is small."""
    dphi = gr.grad(state.chart, state.phi)
    psi2 = np.einsum("xyic,xyic->xy", state.psi, state.psi)
    denom = psi2 + floor**2
    denom = np.where(denom > 0, denom, 1.0)
    chi = np.zeros(state.chi.shape)
    for a in range(2):
        acc = np.zeros(state.chi.shape[:2] + (4,))
        for b in range(2):
            acc = acc + np.einsum("xyi,cd,xyid->xyc",
                                  dphi[:, :, b], cl.GG[b, a], state.psi)
        chi[:, :, a] = acc / denom[..., None]
    return chi


# -- action, energies, residuals ------------------------------------------


def action_density(state: FieldState) -> np.ndarray:
    dphi = gr.grad(state.chart, state.phi)
    e_phi = np.einsum("xyai,xyai->xy", dphi, dphi)
    dpsi = dirac(state)
    psi_d = np.einsum("xyic,xyic->xy", state.psi, dpsi)
    q = q_chi(state)
    q2 = np.einsum("xyac,xyac->xy", q, q)
    push = np.einsum("xyai,xyac->xyic", dphi, q)
    coup = np.einsum("xyic,xyic->xy", push, state.psi)
    psi2 = np.einsum("xyic,xyic->xy", state.psi, state.psi)
    _, B = _geom(state)
    _, Rm = spinor_curvature(state.psi, B)
    return e_phi + psi_d - 4.0 * coup - q2 * psi2 - Rm / 6.0


def action(state: FieldState) -> float:
    """Total action; flat evaluation is exact for the weighted fields."""
    state.require_constraints()
    return gr.integrate(state.chart, action_density(state), weighted=False)


def energy_densities(state: FieldState):
    dphi = gr.grad(state.chart, state.phi)
    e_phi = np.einsum("xyai,xyai->xy", dphi, dphi)
    psi2 = np.einsum("xyic,xyic->xy", state.psi, state.psi)
    return e_phi, psi2**2


def energies(state: FieldState, region=None):
    """(E_phi, E_psi) = (int |d phi|^2, int |psi|^4) over a region."""
    e_phi, e_psi = energy_densities(state)
    w = gr.region_weights(state.chart, region)
    return (gr.integrate(state.chart, e_phi, weighted=False, region_w=w),
            gr.integrate(state.chart, e_psi, weighted=False, region_w=w))


def chi_l4(state: FieldState, region=None) -> float:
    dens = np.einsum("xyac,xyac->xy", state.chi, state.chi) ** 2
    w = gr.region_weights(state.chart, region)
    return gr.integrate(state.chart, dens, weighted=False, region_w=w)


def el_residual_phi(state: FieldState) -> np.ndarray:
    """Defect of the map equation
    tau(phi) = 1/2 R(psi, e_a.psi) phi_* e_a - 1/12 SnablaR(psi) - (gravitino terms),
    evaluated extrinsically: Delta phi - A(grad phi, grad phi) - 1/2 Rc
    + 1/12 SnablaR + div V - A(V_b, phi_* e_b)."""
    state.require_constraints()
    ch = state.chart
    n, B = _geom(state)
    dphi = gr.grad(ch, state.phi)
    lap = gr.laplacian(ch, state.phi)

    a_grad = np.einsum("xyai,xyij,xyaj->xy", dphi, B, dphi)
    res = lap - n * a_grad[..., None]

    # curvature-spinor coupling 1/2 R^i_{jkl} <psi^k, grad phi^j . psi^l>
    bp = np.einsum("xyjk,xyak->xyaj", B, dphi)
    gpsi = np.stack([np.einsum("cd,xyld->xylc", cl.G1, state.psi),
                     np.einsum("cd,xyld->xylc", cl.G2, state.psi)], axis=2)
    M = np.einsum("xykc,xyalc->xyakl", state.psi, gpsi)
    t = np.einsum("xyakl,xyal->xyk", M, bp)
    rc = 2.0 * np.einsum("xyik,xyk->xyi", B, t)
    res = res - 0.5 * rc

    terms = curvature_terms(state)
    res = res + terms.SnablaR / 12.0

    V = v_field(state)
    divv = gr.diff(ch, V[..., 0], 0) + gr.diff(ch, V[..., 1], 1)
    # A(V_b, phi_* e_b) summed over b, normal-valued
    s = np.einsum("xykb,xykj,xybj->xy", V, B, dphi)
    res = res + divv - n * s[..., None]
    res *= ch.mask[..., None]
    return res


def gravitino_force_intrinsic(state: FieldState) -> np.ndarray:
    """The tau-equation gravitino pairing
    <nabla^s_b (e_a.e_b.chi^a), psi^i> + <e_a.e_b.chi^a, nabla~_b psi^i>,
    which the extrinsic div V - A(V, grad phi) reproduces tangentially."""
    ch = state.chart
    tg = twisted_gradient(state)
    out = np.zeros(state.phi.shape)
    for b in range(2):
        s = np.zeros(state.chi.shape[:2] + (4,))
        for a in range(2):
            s = s + np.einsum("cd,xyd->xyc", cl.GG[a, b], state.chi[:, :, a])
        ds = gr.diff(ch, s, b, spin=True)
        out = out + np.einsum("xyc,xyic->xyi", ds, state.psi)
        out = out + np.einsum("xyc,xyic->xyi", s, tg[:, :, b])
    return out


def el_residual_psi(state: FieldState) -> np.ndarray:
    """Defect of the spinor equation
    D psi = |Q chi|^2 psi + 1/3 SR(psi) + 2 (1 (x) phi_*) Q chi."""
    state.require_constraints()
    dpsi = dirac(state)
    q2 = q_chi_norm2(state)
    terms = curvature_terms(state)
    res = (dpsi - q2[..., None, None] * state.psi - terms.SR / 3.0
           - 2.0 * push_q_chi(state))
    res *= state.chart.mask[..., None, None]
    return res


# -- initial data generators ----------------------------------------------


def constant_map_state(chart, target, point=None) -> FieldState:
    K = target.K
    if point is None:
        point = np.zeros(K)
        point[-1] = target.semi_axes[-1]
    phi = np.tile(np.asarray(point, float), chart.mask.shape + (1,))
    psi = np.zeros(chart.mask.shape + (K, 4))
    chi = np.zeros(chart.mask.shape + (2, 4))
    return FieldState(chart, target, phi, psi, chi).project()


def geodesic_map_state(chart, target, speed: float = 1.0) -> FieldState:
    """phi(x, y) = (cos sx, sin sx, 0, ...): a closed-form harmonic map to
    the unit sphere with Delta phi = -s^2 phi = A(grad phi, grad phi)."""
    K = target.K
    phi = np.zeros(chart.mask.shape + (K,))
    phi[..., 0] = np.cos(speed * chart.X)
    phi[..., 1] = np.sin(speed * chart.X)
    psi = np.zeros(chart.mask.shape + (K, 4))
    chi = np.zeros(chart.mask.shape + (2, 4))
    return FieldState(chart, target, phi, psi, chi).project()


def bubble_map(chart, lam: float = 1.0, center=(0.0, 0.0)) -> np.ndarray:
    """Inverse stereographic map at scale lam: energy density
    8 lam^2 / (lam^2 + r^2)^2, total energy 8 pi on the plane."""
    X = (chart.X - center[0]) / lam
    Y = (chart.Y - center[1]) / lam
    r2 = X**2 + Y**2
    phi = np.zeros(chart.mask.shape + (3,))
    phi[..., 0] = 2 * X / (1 + r2)
    phi[..., 1] = 2 * Y / (1 + r2)
    phi[..., 2] = (r2 - 1) / (1 + r2)
    return phi


def bubble_state(chart, target, lam: float = 1.0, center=(0.0, 0.0)) -> FieldState:
    K = target.K
    phi3 = bubble_map(chart, lam, center)
    phi = np.zeros(chart.mask.shape + (K,))
    phi[..., :3] = phi3
    psi = np.zeros(chart.mask.shape + (K, 4))
    chi = np.zeros(chart.mask.shape + (2, 4))
    return FieldState(chart, target, phi, psi, chi).project()


def _fourier_scalar(chart, rng, kmax: int, scale: float,
                    spin: bool = False) -> np.ndarray:
    """Smooth random scalar from a low-order Fourier sum on the chart box.

    With ``spin=True`` on charts carrying an antiperiodic spin structure,
    half-integer modes are used along the flipped axes so the sampled
    field is a smooth section of the spinor bundle.
    """
    lx = chart.hx * (chart.nx if chart.periodic[0] else chart.nx - 1)
    ly = chart.hy * (chart.ny if chart.periodic[1] else chart.ny - 1)
    off_x = 0.5 if (spin and chart.periodic[0] and chart.spin_flip[0] < 0) else 0.0
    off_y = 0.5 if (spin and chart.periodic[1] and chart.spin_flip[1] < 0) else 0.0
    out = np.zeros(chart.mask.shape)
    for kx in range(kmax + 1):
        for ky in range(kmax + 1):
            if kx == 0 and ky == 0 and off_x == 0 and off_y == 0:
                continue
            a, b = rng.normal(size=2) / (1 + kx**2 + ky**2)
            ph = 2 * np.pi * ((kx + off_x) * (chart.X - chart.x0) / lx
                              + (ky + off_y) * (chart.Y - chart.y0) / ly)
            out += a * np.cos(ph) + b * np.sin(ph)
    return scale * out


def random_smooth_state(chart, target, seed: int = 0, amplitude: float = 0.3,
                        kmax: int = 2, spinor_amplitude: float | None = None,
                        gravitino_amplitude: float | None = None) -> FieldState:
    """Random low-order Fourier fields: phi near a base point, tangent psi,
    smooth chi.  Deterministic in the seed."""
    rng = np.random.default_rng(seed)
    K = target.K
    if spinor_amplitude is None:
        spinor_amplitude = amplitude
    if gravitino_amplitude is None:
        gravitino_amplitude = amplitude
    base = np.zeros(K)
    base[-1] = target.semi_axes[-1]
    phi = np.tile(base, chart.mask.shape + (1,))
    for i in range(K):
        phi[..., i] = phi[..., i] + _fourier_scalar(chart, rng, kmax, amplitude)
    psi = np.stack([np.stack([_fourier_scalar(chart, rng, kmax, spinor_amplitude, spin=True)
                              for _ in range(4)], axis=-1) for _ in range(K)], axis=-2)
    chi = np.stack([np.stack([_fourier_scalar(chart, rng, kmax, gravitino_amplitude, spin=True)
                              for _ in range(4)], axis=-1) for _ in range(2)], axis=-2)
    return FieldState(chart, target, phi, psi, chi).project()


def constant_spinor_gravitino(chart, amplitude: float = 1.0) -> np.ndarray:
    chi = np.zeros(chart.mask.shape + (2, 4))
    chi[..., 0, 0] = amplitude
    chi[..., 1, 2] = amplitude
    return chi


def bump_gravitino(chart, amplitude: float = 1.0, width: float | None = None,
                   center=None) -> np.ndarray:
    """Smooth compactly-supported gravitino bump, centered mid-chart by
    default (so it stays clear of boundaries and periodic seams)."""
    if width is None:
        width = 0.35 * min(chart.hx * (chart.nx - 1), chart.hy * (chart.ny - 1))
    if center is None:
        center = (0.5 * (chart.x[0] + chart.x[-1]), 0.5 * (chart.y[0] + chart.y[-1]))
    r2 = ((chart.X - center[0])**2 + (chart.Y - center[1])**2) / width**2
    prof = np.where(r2 < 1, np.exp(1.0 - 1.0 / np.maximum(1e-12, 1 - r2)), 0.0)
    chi = np.zeros(chart.mask.shape + (2, 4))
    chi[..., 0, 0] = amplitude * prof
    chi[..., 1, 1] = -amplitude * prof
    chi[..., 0, 3] = 0.5 * amplitude * prof
    return chi


GENERATORS = {
    "constant": constant_map_state,
    "geodesic": geodesic_map_state,
    "bubble": bubble_state,
    "random_fourier": random_smooth_state,
}
