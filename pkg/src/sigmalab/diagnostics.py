"""Numerical verification of the conservation-law layer: energy-momentum
tensor, holomorphic quadratic differential, Pohozaev circle identities,
and the bubbling/neck energy bookkeeping.

All quantities are nodal fields built from the same stencils as the
residuals; convergence statements are reported as fitted orders over
grid refinements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import clifford as cl
from . import fields as fl
from . import grid as gr
from .errors import CircleOutOfDomain, NoConcentration


@dataclass
class EMTField:
    T11: np.ndarray
    T12: np.ndarray
    T22: np.ndarray
    trace: np.ndarray
    F11: np.ndarray
    F12: np.ndarray


def _spin_pair_matrix(state) -> np.ndarray:
    """S[a, b] = <psi, gamma(e_a) nabla~_b psi> per node."""
    tg = fl.twisted_gradient(state)
    gammas = (cl.G1, cl.G2)
    S = np.zeros(state.phi.shape[:2] + (2, 2))
    for a in range(2):
        for b in range(2):
            S[..., a, b] = np.einsum("xyic,cd,xyid->xy",
                                     state.psi, gammas[a], tg[:, :, b])
    return S


def _gravitino_pair_matrix(state) -> np.ndarray:
    """G[a, b] = <e_eta . e_a . chi^eta (x) phi_* e_b, psi> per node."""
    dphi = gr.grad(state.chart, state.phi)
    G = np.zeros(state.phi.shape[:2] + (2, 2))
    for a in range(2):
        s = np.zeros(state.chi.shape[:2] + (4,))
        for e in range(2):
            s = s + np.einsum("cd,xyd->xyc", cl.GG[e, a], state.chi[:, :, e])
        for b in range(2):
            G[..., a, b] = np.einsum("xyc,xyi,xyic->xy", s, dphi[:, :, b], state.psi)
    return G


def energy_momentum(state) -> EMTField:
    """Nodewise energy-momentum tensor (metric variation of the action) and
    the abbreviated gravitino terms F11, F12 of the quadratic differential."""
    dphi = gr.grad(state.chart, state.phi)
    e = np.einsum("xyai,xybi->xyab", dphi, dphi)
    S = _spin_pair_matrix(state)
    G = _gravitino_pair_matrix(state)
    dirac_sc = S[..., 0, 0] + S[..., 1, 1]
    edens = e[..., 0, 0] + e[..., 1, 1]
    q2 = fl.q_chi_norm2(state)
    psi2 = np.einsum("xyic,xyic->xy", state.psi, state.psi)
    push = fl.push_q_chi(state)
    c = np.einsum("xyic,xyic->xy", push, state.psi)
    _, B = fl._geom(state)
    _, Rm = fl.spinor_curvature(state.psi, B)

    diag = -dirac_sc + 4.0 * c + q2 * psi2 + Rm / 6.0

    def comp(a, b):
        t = (2.0 * e[..., a, b] + 0.5 * (S[..., a, b] + S[..., b, a])
             + G[..., a, b] + G[..., b, a])
        if a == b:
            t = t - edens + diag
        return t * state.chart.mask

    T11 = comp(0, 0)
    T12 = comp(0, 1)
    T22 = comp(1, 1)
    F11 = (2.0 * G[..., 0, 0] + 2.0 * c) * state.chart.mask
    F12 = 2.0 * G[..., 0, 1] * state.chart.mask
    return EMTField(T11=T11, T12=T12, T22=T22, trace=T11 + T22, F11=F11, F12=F12)


def divergence_T(emt: EMTField, state) -> np.ndarray:
    ch = state.chart
    div1 = gr.diff(ch, emt.T11, 0) + gr.diff(ch, emt.T12, 1)
    div2 = gr.diff(ch, emt.T12, 0) + gr.diff(ch, emt.T22, 1)
    return np.stack([div1, div2], axis=-1)


def _l2(chart, f, where) -> float:
    w = np.where(where, chart.quad_weights, 0.0)
    return float(np.sqrt(np.einsum("ij,ij->", w, np.asarray(f) ** 2)))


def holomorphicity_residual(emt: EMTField, state, margin: int = 3) -> float:
    """L^2 norm of the Cauchy-Riemann defect of T11 - i T12 away from the
    boundary rim."""
    ch = state.chart
    re = gr.diff(ch, emt.T11, 0) + gr.diff(ch, emt.T12, 1)
    im = gr.diff(ch, emt.T12, 0) - gr.diff(ch, emt.T11, 1)
    where = ch.interior_margin(margin)
    return float(np.sqrt(_l2(ch, re, where) ** 2 + _l2(ch, im, where) ** 2))


def divergence_T_norm(state, margin: int = 3) -> float:
    emt = energy_momentum(state)
    div = divergence_T(emt, state)
    ch = state.chart
    where = ch.interior_margin(margin)
    return float(np.sqrt(_l2(ch, div[..., 0], where) ** 2
                         + _l2(ch, div[..., 1], where) ** 2))


def trace_norm(state, margin: int = 3) -> float:
    emt = energy_momentum(state)
    return _l2(state.chart, emt.trace, state.chart.interior_margin(margin))


# -- Pohozaev circle identities -----------------------------------------


@dataclass
class PohozaevRow:
    r: float
    lhs: float
    rhs_r: float
    rhs_theta: float


def pohozaev(state, radii, center=(0.0, 0.0), m: int | None = None):
    """Circle-averaged radial/angular balance: both right-hand forms are
    evaluated with polar derivatives obtained by the chain rule from the
    Cartesian stencils."""
    ch = state.chart
    dphi = gr.grad(ch, state.phi)
    P = np.einsum("xyai,xybi->xyab", dphi, dphi)
    S = _spin_pair_matrix(state)
    _, B = fl._geom(state)
    _, Rm = fl.spinor_curvature(state.psi, B)
    emt = energy_momentum(state)

    packed = np.stack([P[..., 0, 0], P[..., 0, 1], P[..., 1, 1],
                       S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1],
                       Rm, emt.F11, emt.F12], axis=-1)
    rows = []
    for r in radii:
        theta, vals = gr.circle_samples(ch, packed, r, center=center, m=m)
        cs, sn = np.cos(theta), np.sin(theta)
        p11, p12, p22 = vals[:, 0], vals[:, 1], vals[:, 2]
        s11, s12, s21, s22 = vals[:, 3], vals[:, 4], vals[:, 5], vals[:, 6]
        rm, f11, f12 = vals[:, 7], vals[:, 8], vals[:, 9]

        rad = cs * cs * p11 + 2 * cs * sn * p12 + sn * sn * p22
        ang = sn * sn * p11 - 2 * cs * sn * p12 + cs * cs * p22
        spin_r = cs * cs * s11 + cs * sn * (s12 + s21) + sn * sn * s22
        spin_t = sn * sn * s11 - cs * sn * (s12 + s21) + cs * cs * s22
        fterm = f11 * np.cos(2 * theta) + f12 * np.sin(2 * theta)

        dth = 2 * np.pi / len(theta)
        lhs = float((rad - ang).sum() * dth)
        rhs_r = float((-spin_r + rm / 6.0 - fterm).sum() * dth)
        rhs_t = float((spin_t - rm / 6.0 - fterm).sum() * dth)
        rows.append(PohozaevRow(r=float(r), lhs=lhs, rhs_r=rhs_r, rhs_theta=rhs_t))
    return rows


# -- neck energies and bubbling bookkeeping ------------------------------


def _chart_radius(chart) -> float:
    if chart.kind in ("disk", "annulus"):
        return float(chart.params.get("radius", chart.params.get("r_out")))
    return float(min(chart.hx * (chart.nx - 1), chart.hy * (chart.ny - 1)) / 2)


def neck_energy(state, center, delta: float, R: float, lam: float):
    """(E_phi, E_psi) over the neck annulus lam*R <= |x - center| <= delta."""
    a = lam * R
    if a >= delta:
        raise CircleOutOfDomain(f"empty neck annulus: lam*R = {a:.3g} >= delta = {delta:.3g}")
    rad = _chart_radius(state.chart)
    if delta > rad * (1 + 1e-12) + np.hypot(*center):
        raise CircleOutOfDomain("neck annulus leaves the chart")
    region = ("annulus", center[0], center[1], a, delta)
    return fl.energies(state, region)


def ball_energy(state, center, r: float) -> float:
    e_phi, e_psi = fl.energies(state, ("disk", center[0], center[1], r))
    return e_phi + e_psi


@dataclass
class BlowupPoint:
    x: tuple
    lam: float
    e_bubble_phi: float
    e_bubble_psi: float


@dataclass
class BlowupRow:
    k: int
    points: list
    e_total_phi: float
    e_total_psi: float
    e_limit_phi: float
    e_limit_psi: float
    e_neck_phi: float
    e_neck_psi: float
    defect: float


@dataclass
class BlowupReport:
    rows: list = field(default_factory=list)


def detect_concentrations(state, threshold: float, max_points: int = 4,
                          ladder_depth: int = 8):
    """Energy-density peaks whose balls B_r carry at least ``threshold``
    energy for every feasible radius of the dyadic ladder."""
    ch = state.chart
    e_phi, e_psi = fl.energy_densities(state)
    dens = (e_phi + e_psi) * ch.mask
    rad = _chart_radius(ch)
    h = max(ch.hx, ch.hy)
    points = []
    work = dens.copy()
    for _ in range(max_points):
        ij = np.unravel_index(np.argmax(work), work.shape)
        x = (float(ch.X[ij]), float(ch.Y[ij]))
        ladder = [rad * 2.0**-j for j in range(1, ladder_depth + 1)]
        ladder = [r for r in ladder if r >= 2 * h]
        if not ladder:
            break
        if all(ball_energy(state, x, r) >= threshold for r in ladder):
            points.append(x)
            cut = np.hypot(ch.X - x[0], ch.Y - x[1]) <= max(0.25 * rad, 4 * h)
            work = np.where(cut, 0.0, work)
        else:
            break
    if not points:
        raise NoConcentration("no disk carries energy above the threshold")
    return points


def select_scale(state, center, e1: float, r_min: float | None = None,
                 r_max: float | None = None) -> float:
    """Radius lam with E(B_lam(center)) = e1 / 2 (bisection; the discrete
    analogue of the blow-up scale selection rule)."""
    ch = state.chart
    h = max(ch.hx, ch.hy)
    if r_min is None:
        r_min = 2 * h
    if r_max is None:
        r_max = 0.95 * _chart_radius(ch)
    target_e = e1 / 2.0
    lo, hi = r_min, r_max
    if ball_energy(state, center, lo) >= target_e:
        return lo
    if ball_energy(state, center, hi) < target_e:
        return hi
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if ball_energy(state, center, mid) < target_e:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bubble_decompose(states, threshold: float = 0.1, e1: float | None = None,
                     schedule=None, bubble_chart_n: int | None = None):
    """Blow-up bookkeeping for a generated family: detect concentration
    points, select scales, extract rescaled bubbles, and assemble the
    per-state energy ledger

        E_total = E_limit + sum E_bubble + E_neck + defect.

    ``schedule`` is an optional per-state dict(delta=..., R=...) giving the
    neck geometry; defaults keep the neck inside the chart.
    """
    if e1 is None:
        e1 = 8.0 * np.pi
    report = BlowupReport()
    for k, state in enumerate(states):
        sched = (schedule[k] if schedule is not None else {})
        e_tot_phi, e_tot_psi = fl.energies(state)
        points = detect_concentrations(state, threshold)
        rad = _chart_radius(state.chart)
        delta = float(sched.get("delta", 0.45 * rad))
        pts = []
        e_neck_phi = 0.0
        e_neck_psi = 0.0
        covered_phi = 0.0
        covered_psi = 0.0
        for x in points:
            lam = select_scale(state, x, e1, r_max=0.8 * delta)
            R = float(sched.get("R", 0.5 * delta / lam))
            rescaled = gr.conformal_rescale(state, lam, x)
            eb_phi, eb_psi = fl.energies(rescaled, ("disk", 0.0, 0.0, R))
            np_phi, np_psi = neck_energy(state, x, delta, R, lam)
            e_neck_phi += np_phi
            e_neck_psi += np_psi
            din_phi, din_psi = fl.energies(state, ("disk", x[0], x[1], delta))
            covered_phi += din_phi
            covered_psi += din_psi
            pts.append(BlowupPoint(x=x, lam=lam, e_bubble_phi=eb_phi,
                                   e_bubble_psi=eb_psi))
        e_lim_phi = e_tot_phi - covered_phi
        e_lim_psi = e_tot_psi - covered_psi
        led_phi = e_lim_phi + sum(p.e_bubble_phi for p in pts) + e_neck_phi
        led_psi = e_lim_psi + sum(p.e_bubble_psi for p in pts) + e_neck_psi
        defect = abs(e_tot_phi - led_phi) + abs(e_tot_psi - led_psi)
        report.rows.append(BlowupRow(
            k=k, points=pts,
            e_total_phi=e_tot_phi, e_total_psi=e_tot_psi,
            e_limit_phi=e_lim_phi, e_limit_psi=e_lim_psi,
            e_neck_phi=e_neck_phi, e_neck_psi=e_neck_psi,
            defect=defect,
        ))
    return report


# -- convergence-order fitting -------------------------------------------


def fit_order(hs, norms) -> float:
    """Least-squares slope of log|norm| against log h (observed order)."""
    hs = np.asarray(hs, dtype=float)
    norms = np.asarray(norms, dtype=float)
    good = norms > 0
    if good.sum() < 2:
        return np.inf
    return float(np.polyfit(np.log(hs[good]), np.log(norms[good]), 1)[0])
