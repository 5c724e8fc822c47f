"""Critical-point solvers and the small-energy experiments.

The main solver is damped (Gauss-)Newton on the stacked, tangentially
projected Euler-Lagrange residual, with Jacobian-vector products by
forward differencing of the retracted residual map and GMRES for the
linear subproblems (matrix-free, block preconditioned by the assembled
linear part).  Constraints are handled by projection after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import clifford as cl
from . import fields as fl
from . import grid as gr
from .errors import Diverged, PicardStalled
from .target import sphere


@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 30
    damping: float = 0.0
    shrink: float = 0.5
    seed: int = 0
    gmres_rtol: float = 1e-4
    gmres_restart: int = 80
    gmres_maxiter: int = 6


@dataclass
class SolveReport:
    converged: bool = False
    iterations: int = 0
    residual_phi: float = np.nan
    residual_psi: float = np.nan
    supercurrent: float = np.nan
    residual_history: list = field(default_factory=list)
    energy_history: list = field(default_factory=list)


# -- sparse stencil assembly ----------------------------------------------


def _valid_index(chart) -> np.ndarray:
    idx = -np.ones((chart.nx, chart.ny), dtype=int)
    idx[chart.mask] = np.arange(int(chart.mask.sum()))
    return idx


def _shift_index(chart, idx, axis, k):
    """(index-at-i+k, wrapped-across-the-seam) arrays."""
    out = np.roll(idx, -k, axis=axis)
    crossed = np.zeros(idx.shape, dtype=bool)
    sl = [slice(None)] * 2
    if k > 0:
        sl[axis] = slice(idx.shape[axis] - k, None)
    elif k < 0:
        sl[axis] = slice(0, -k)
    crossed[tuple(sl)] = True
    if not chart.periodic[axis]:
        out[crossed] = -1
        crossed[:] = False
    return out, crossed


def d1_matrix(chart, axis, spin: bool = False) -> sp.csr_matrix:
    """Sparse first-derivative operator over valid nodes, with the same
    stencil selection as grid.diff; ``spin`` applies the spin-structure
    sign to entries crossing a periodic seam."""
    idx = _valid_index(chart)
    nv = int(chart.mask.sum())
    h = chart.hx if axis == 0 else chart.hy
    flip = chart.spin_flip[axis] if spin else 1
    sh, crossed = {}, {}
    for k in (-2, -1, 1, 2):
        sh[k], crossed[k] = _shift_index(chart, idx, axis, k)
    has = {k: (sh[k] >= 0) & chart.mask for k in sh}

    rows, cols, vals = [], [], []

    def add(sel, entries):
        r = idx[sel]
        for k, c in entries:
            rows.append(r)
            if k == 0:
                cols.append(idx[sel])
                vals.append(np.full(r.shape, float(c)))
            else:
                cols.append(sh[k][sel])
                sign = np.where(crossed[k][sel], float(flip), 1.0)
                vals.append(c * sign)

    central = has[1] & has[-1]
    add(central, [(1, 0.5 / h), (-1, -0.5 / h)])
    fwd = ~has[-1] & has[1] & has[2] & chart.mask
    add(fwd, [(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)])
    bwd = ~has[1] & has[-1] & has[-2] & chart.mask
    add(bwd, [(0, 1.5 / h), (-1, -2.0 / h), (-2, 0.5 / h)])
    fwd1 = ~has[-1] & has[1] & ~has[2] & chart.mask
    add(fwd1, [(0, -1.0 / h), (1, 1.0 / h)])
    bwd1 = ~has[1] & has[-1] & ~has[-2] & chart.mask
    add(bwd1, [(0, 1.0 / h), (-1, -1.0 / h)])

    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(nv, nv))


def lap5_matrix(chart, spin: bool = False) -> sp.csr_matrix:
    """Standard 5-point Laplacian over valid nodes (preconditioning and
    relaxation flows)."""
    idx = _valid_index(chart)
    nv = int(chart.mask.sum())
    rows, cols, vals = [], [], []
    for axis, h in ((0, chart.hx), (1, chart.hy)):
        flip = chart.spin_flip[axis] if spin else 1
        for k in (-1, 1):
            shk, crossed = _shift_index(chart, idx, axis, k)
            sel = (shk >= 0) & chart.mask
            sign = np.where(crossed[sel], float(flip), 1.0)
            rows.append(idx[sel])
            cols.append(shk[sel])
            vals.append(sign / h**2)
            rows.append(idx[sel])
            cols.append(idx[sel])
            vals.append(np.full(int(sel.sum()), -1.0 / h**2))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(nv, nv))


def assemble_dirac(state) -> sp.csr_matrix:
    """Sparse twisted Dirac operator (gamma-diffs plus the second-
    fundamental-form coupling) over valid nodes, fiber size 4K."""
    ch = state.chart
    K = state.K
    nf = 4 * K
    eyeK = np.eye(K)
    d1x = d1_matrix(ch, 0, spin=True)
    d1y = d1_matrix(ch, 1, spin=True)
    L = (sp.kron(d1x, np.kron(eyeK, cl.G1), format="csr")
         + sp.kron(d1y, np.kron(eyeK, cl.G2), format="csr"))

    m = ch.mask
    n = state.target.unit_normal(state.phi[m])
    B = state.target.bform(state.phi[m])
    dphi = gr.grad(ch, state.phi)
    bpx = np.einsum("vjk,vk->vj", B, dphi[:, :, 0][m])
    bpy = np.einsum("vjk,vk->vj", B, dphi[:, :, 1][m])
    blocks = -(np.einsum("vi,vk,cd->vickd", n, bpx, cl.G1)
               + np.einsum("vi,vk,cd->vickd", n, bpy, cl.G2))
    nv = n.shape[0]
    blocks = blocks.reshape(nv, nf, nf)
    P = sp.bsr_matrix((blocks, np.arange(nv), np.arange(nv + 1)),
                      shape=(nf * nv, nf * nv)).tocsr()
    return L + P


# -- Dirac subsolve --------------------------------------------------------


def hf_matrix(chart, spin: bool = False) -> sp.csr_matrix:
    """High-frequency detector: composed-central minus 5-point Laplacian.
    O(h^2) * 4th derivative on smooth fields, O(1/h^2) on checkerboards.
    Rows are kept only where the full +-2 stencil exists (the two-stencil
    difference is meaningless at one-sided closures)."""
    d1x = d1_matrix(chart, 0, spin)
    d1y = d1_matrix(chart, 1, spin)
    wide = d1x @ d1x + d1y @ d1y
    hf = (wide - lap5_matrix(chart, spin)).tocsr()
    deep = chart.interior_margin(2)[chart.mask]
    keep = sp.diags(deep.astype(float))
    return (keep @ hf).tocsr()


def _submatrix(A, rows, cols):
    return A.tocsr()[rows].tocsc()[:, cols]


_SPLU_LIMIT = 80_000


def _sparse_solver(A):
    """Direct factorization when affordable, ILU-preconditioned GMRES
    beyond the memory-safe size."""
    A = A.tocsc()
    if A.shape[0] <= _SPLU_LIMIT:
        lu = spla.splu(A)
        return lu.solve
    ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=12)
    M = spla.LinearOperator(A.shape, matvec=ilu.solve)

    def solve(b):
        x, info = spla.gmres(A, b, rtol=1e-12, atol=0.0, restart=120,
                             maxiter=40, M=M)
        return x

    return solve


# -- FFT solvers for flat periodic operators ---------------------------------


def _axis_phase(chart, axis):
    n = (chart.nx, chart.ny)[axis]
    if chart.periodic[axis] and chart.spin_flip[axis] < 0:
        return np.exp(1j * np.pi * np.arange(n) / n)
    return np.ones(n)


def _axis_sine(chart, axis, spin: bool):
    """Fourier symbol of the central first derivative on the (possibly
    half-integer shifted) mode lattice."""
    n = (chart.nx, chart.ny)[axis]
    h = (chart.hx, chart.hy)[axis]
    shift = 0.5 if (spin and chart.spin_flip[axis] < 0) else 0.0
    m = np.arange(n) + shift
    return np.sin(2 * np.pi * m / n) / h


def torus_dirac_fft_solver(chart, K, mu: float = 0.0, wilson: float = 0.0):
    """Inverse of the flat antiperiodic Dirac operator plus the scalar
    Wilson/damping terms, mode by mode via FFT.  Exact on the flat part;
    used as the preconditioner (and the whole solver in the flat limit).

    Per mode the fiber matrix is i s.Gamma + c(k) I with real c, whose
    inverse is (c - i s.Gamma)/(c^2 + |s|^2)."""
    sx = _axis_sine(chart, 0, spin=True)
    sy = _axis_sine(chart, 1, spin=True)
    px = _axis_phase(chart, 0)
    py = _axis_phase(chart, 1)
    phase = px[:, None] * py[None, :]
    s2 = (sx**2)[:, None] + (sy**2)[None, :]
    if wilson:
        h = max(chart.hx, chart.hy)

        def half_sin2(axis):
            n = (chart.nx, chart.ny)[axis]
            ha = (chart.hx, chart.hy)[axis]
            shift = 0.5 if chart.spin_flip[axis] < 0 else 0.0
            return 4 * np.sin(np.pi * (np.arange(n) + shift) / n) ** 2 / ha**2

        wide = -s2
        lap5 = -(half_sin2(0)[:, None] + half_sin2(1)[None, :])
        c = wilson * h * (wide - lap5) + mu
    else:
        c = np.full_like(s2, mu)
    den = c**2 + s2
    Sx = sx[:, None, None, None]
    Sy = sy[None, :, None, None]

    def apply(v):
        f = v.reshape(chart.nx, chart.ny, K, 4)
        g = f / phase[:, :, None, None]
        gh = np.fft.fft2(g, axes=(0, 1))
        num = (Sx * np.einsum("ab,xykb->xyka", cl.G1, gh)
               + Sy * np.einsum("ab,xykb->xyka", cl.G2, gh))
        xh = (c[:, :, None, None] * gh - 1j * num) / den[:, :, None, None]
        out = np.fft.ifft2(xh, axes=(0, 1)) * phase[:, :, None, None]
        return np.real(out).reshape(v.shape)

    return apply


def torus_lap_fft_solver(chart, ncomp, mu: float = 1e-6):
    """Inverse of the composed-central (wide) Laplacian plus damping."""
    sx = _axis_sine(chart, 0, spin=False)
    sy = _axis_sine(chart, 1, spin=False)
    sym = -((sx**2)[:, None] + (sy**2)[None, :]) - mu

    def apply(v):
        f = v.reshape(chart.nx, chart.ny, ncomp)
        fh = np.fft.fft2(f, axes=(0, 1))
        out = np.fft.ifft2(fh / sym[:, :, None], axes=(0, 1))
        return np.real(out).reshape(v.shape)

    return apply


def dirac_subsolve(state, max_picard: int = 100, drop_cubic: bool = False,
                   wilson: float = 0.5):
    """Solve the spinor equation D psi = |Q chi|^2 psi + 1/3 SR(psi)
    + 2 (1 (x) phi_*) Q chi at frozen phi, chi: sparse direct solve of the
    linear part, Picard iteration on the cubic curvature term.

    On fully periodic charts the square system is solved directly; an
    O(h^3)-consistent high-frequency term wilson * h * (wide - compact
    Laplacian) lifts the sublattice parity modes of the central-difference
    Dirac stencil without degrading second-order convergence.

    On bounded charts the full Dirichlet trace overdetermines the
    first-order operator, so the interior values solve the quadrature-
    weighted least-squares problem over all valid rows with the boundary
    values of the input state held fixed.
    """
    state = state.project()
    ch = state.chart
    K = state.K
    nf = 4 * K
    periodic = ch.periodic[0] and ch.periodic[1]
    L = assemble_dirac(state)
    q2 = fl.q_chi_norm2(state)[ch.mask]
    mass = sp.kron(sp.diags(q2), sp.eye(nf), format="csr")
    reg = wilson * max(ch.hx, ch.hy) * sp.kron(hf_matrix(ch, spin=True), sp.eye(nf), format="csr")
    A = (L - mass + reg).tocsr()

    if periodic:
        Mfft = torus_dirac_fft_solver(ch, K, wilson=wilson)
        Acsr = A.tocsr()
        Mop = spla.LinearOperator(A.shape, matvec=Mfft)

        def solve_lin(rhs_field, psi_b):
            x, info = spla.gmres(Acsr, rhs_field.reshape(-1), rtol=1e-12,
                                 atol=0.0, restart=100, maxiter=30, M=Mop)
            return x.reshape(-1, K, 4)

        inter = np.ones(int(ch.mask.sum()), dtype=bool)
    else:
        inter = ch.interior[ch.mask]
        fiber_sel = np.repeat(inter, nf)
        rows_i = np.where(fiber_sel)[0]
        rows_b = np.where(~fiber_sel)[0]
        A_I = A[:, rows_i]
        A_B = A[:, rows_b]
        wq = np.repeat(ch.quad_weights[ch.mask], nf)
        W = sp.diags(wq)
        N = (A_I.T @ W @ A_I).tocsc()
        solve_core = _sparse_solver(N)

        def solve_lin(rhs_field, psi_b):
            rhs = rhs_field.reshape(-1) - A_B @ psi_b
            return solve_core(A_I.T @ (wq * rhs)).reshape(-1, K, 4)

    psi_b = state.psi[ch.mask][~inter].reshape(-1)
    source = 2.0 * fl.push_q_chi(state)
    rhs_fixed = source[ch.mask]

    psi = state.psi.copy()
    _, B = fl._geom(state)
    for it in range(max_picard):
        if drop_cubic:
            cubic = np.zeros_like(psi)
        else:
            SR, _ = fl.spinor_curvature(psi, B)
            cubic = SR / 3.0
        sol = solve_lin(rhs_fixed + cubic[ch.mask], psi_b)
        new = psi.copy()
        vals = new[ch.mask]
        vals[inter] = sol
        new[ch.mask] = vals
        upd = np.max(np.abs(new - psi)) / (1.0 + np.max(np.abs(new)))
        psi = new
        if drop_cubic or upd < 1e-12:
            break
        if it == max_picard - 1 and upd > 1e-6:
            raise PicardStalled(f"relative update {upd:.2e} after {max_picard} iterations")
    out = fl.FieldState(ch, state.target, state.phi.copy(), psi, state.chi.copy())
    return out.project()


# -- main Gauss-Newton solve ------------------------------------------------


class _System:
    """Packing, residual and tangent-projection plumbing for one solve."""

    def __init__(self, state):
        self.template = state.project()
        ch = state.chart
        self.ch = ch
        self.K = state.K
        self.I = ch.interior
        self.nphi = int(self.I.sum()) * self.K
        self.scale = np.sqrt(ch.hx * ch.hy)

    def pack(self, state):
        return np.concatenate([state.phi[self.I].ravel(),
                               state.psi[self.I].ravel()])

    def unpack(self, x):
        st = self.template.copy()
        st.phi[self.I] = x[:self.nphi].reshape(-1, self.K)
        st.psi[self.I] = x[self.nphi:].reshape(-1, self.K, 4)
        return st.project()

    def tangent_project_vec(self, state, v):
        """Project a packed increment onto the constraint tangent space."""
        n = state.target.unit_normal(state.phi[self.I])
        vphi = v[:self.nphi].reshape(-1, self.K)
        vphi = vphi - n * np.einsum("pk,pk->p", n, vphi)[:, None]
        vpsi = v[self.nphi:].reshape(-1, self.K, 4)
        vpsi = vpsi - n[:, :, None] * np.einsum("pk,pkc->pc", n, vpsi)[:, None, :]
        return np.concatenate([vphi.ravel(), vpsi.ravel()])

    def residual(self, state):
        rphi = fl.el_residual_phi(state)
        rpsi = fl.el_residual_psi(state)
        m = self.ch.mask
        n = np.zeros(m.shape + (self.K,))
        n[m] = state.target.unit_normal(state.phi[m])
        rphi = rphi - n * np.einsum("xyk,xyk->xy", n, rphi)[..., None]
        rpsi = rpsi - n[..., None] * np.einsum("xyk,xykc->xyc", n, rpsi)[..., None, :]
        return rphi, rpsi

    def F(self, x):
        st = self.unpack(x)
        rphi, rpsi = self.residual(st)
        return self.scale * np.concatenate([rphi[self.I].ravel(),
                                            rpsi[self.I].ravel()]), st

    def block_norms(self, x):
        st = self.unpack(x)
        rphi, rpsi = self.residual(st)
        nphi = self.scale * np.linalg.norm(rphi[self.I].ravel())
        npsi = self.scale * np.linalg.norm(rpsi[self.I].ravel())
        return nphi, npsi


def _preconditioner(state, sys: _System):
    ch = state.chart
    K = state.K
    if ch.periodic[0] and ch.periodic[1]:
        lap_inv = torus_lap_fft_solver(ch, K, mu=1e-3)
        dir_inv = torus_dirac_fft_solver(ch, K, mu=1e-3)
        nphi = sys.nphi

        def apply(v):
            out = np.empty_like(v)
            out[:nphi] = lap_inv(v[:nphi])
            out[nphi:] = dir_inv(v[nphi:])
            return out

        return spla.LinearOperator((v0 := sys.nphi + 4 * sys.nphi, v0),
                                   matvec=apply)
    inter = ch.interior[ch.mask]
    lap = lap5_matrix(ch)
    selK = np.where(np.repeat(inter, K))[0]
    Aphi = _submatrix(sp.kron(lap, sp.eye(K), format="csr"), selK, selK)
    dir_mat = assemble_dirac(state)
    q2 = fl.q_chi_norm2(state)[ch.mask]
    dir_mat = (dir_mat - sp.kron(sp.diags(q2), sp.eye(4 * K), format="csr")
               + 0.5 * max(ch.hx, ch.hy)
               * sp.kron(hf_matrix(ch, spin=True), sp.eye(4 * K), format="csr"))
    sel4 = np.where(np.repeat(inter, 4 * K))[0]
    Apsi = _submatrix(dir_mat, sel4, sel4)
    try:
        lu_phi = spla.splu(Aphi)
        lu_psi = spla.splu(Apsi)
    except RuntimeError:
        return None
    nphi = sys.nphi

    def apply(v):
        out = np.empty_like(v)
        out[:nphi] = lu_phi.solve(v[:nphi])
        out[nphi:] = lu_psi.solve(v[nphi:])
        return out

    return spla.LinearOperator((nphi + Apsi.shape[0],) * 2, matvec=apply)


def solve(state, opts: SolveOptions | None = None):
    """Damped Newton/Gauss-Newton on the stacked EL residual.

    Returns (solved FieldState, SolveReport).  Raises Diverged when the
    damping parameter exceeds 1e6 or 20 consecutive steps fail.
    """
    if opts is None:
        opts = SolveOptions()
    sys = _System(state)
    x = sys.pack(sys.template)
    Fx, st = sys.F(x)
    norm = float(np.linalg.norm(Fx))
    mu = float(opts.damping)
    report = SolveReport()
    report.residual_history.append(norm)
    e_phi, e_psi = fl.energies(st)
    report.energy_history.append((e_phi, e_psi))
    M = _preconditioner(st, sys)
    fails = 0

    for it in range(opts.max_iter):
        if norm <= opts.tol:
            report.converged = True
            break

        def matvec(v, x=x, Fx=Fx, st=st, mu=mu):
            vt = sys.tangent_project_vec(st, v)
            eps = 1e-7 * (1.0 + np.linalg.norm(x)) / max(np.linalg.norm(vt), 1e-30)
            Fp, _ = sys.F(x + eps * vt)
            jv = (Fp - Fx) / eps
            return jv + (v - vt) + mu * v

        A = spla.LinearOperator((x.size, x.size), matvec=matvec)
        d, _ = spla.gmres(A, -Fx, rtol=opts.gmres_rtol, atol=0.0,
                          restart=opts.gmres_restart,
                          maxiter=opts.gmres_maxiter, M=M)
        d = sys.tangent_project_vec(st, d)

        alpha = 1.0
        accepted = False
        while alpha > 1e-4:
            Ft, st_t = sys.F(x + alpha * d)
            if np.linalg.norm(Ft) <= (1 - 1e-4 * alpha) * norm:
                x = sys.pack(st_t)
                Fx, st = sys.F(x)
                norm = float(np.linalg.norm(Fx))
                accepted = True
                break
            alpha *= opts.shrink
        if accepted:
            mu = max(mu * 0.25, 0.0)
            fails = 0
            report.residual_history.append(norm)
            e_phi, e_psi = fl.energies(st)
            report.energy_history.append((e_phi, e_psi))
            report.iterations = it + 1
        else:
            fails += 1
            mu = max(10.0 * mu, 1e-4)
            if mu > 1e6 or fails > 20:
                raise Diverged(f"residual stuck at {norm:.3e} with damping {mu:.1e}")
    else:
        report.converged = norm <= opts.tol

    report.residual_phi, report.residual_psi = sys.block_norms(x)
    final = sys.unpack(x)
    report.supercurrent = fl.supercurrent_norm(final)
    return final, report


# -- variational consistency ------------------------------------------------


def _bump_window(chart, margin: int = 4):
    return chart.interior_margin(margin).astype(float)


def gradient_check(state, n_directions: int = 5, seed: int = 0,
                   directions: str = "mixed") -> float:
    """Compare centered finite differences of the action along admissible
    perturbations (phi retracted to N, psi re-projected tangent) with the
    residual pairing

        dA/dt = -2 <res_phi, dphi> + 2 <res_psi, dpsi + dpsi_ind>

    where dpsi_ind = n (x) (B dphi . psi) is the normal motion of psi
    induced by the tangency constraint when phi varies (it pairs only with
    the discretization-level normal part of the spinor residual and
    vanishes in the continuum).  Returns the maximum relative error over
    the sampled directions.
    """
    state = state.project()
    ch = state.chart
    rng = np.random.default_rng(seed)
    win = _bump_window(ch)[..., None]
    w = ch.quad_weights
    rphi = fl.el_residual_phi(state)
    rpsi = fl.el_residual_psi(state)
    m = ch.mask
    K = state.K
    n = np.zeros(m.shape + (K,))
    n[m] = state.target.unit_normal(state.phi[m])
    B = np.zeros(m.shape + (K, K))
    B[m] = state.target.bform(state.phi[m])
    worst = 0.0
    for _ in range(n_directions):
        dphi = np.zeros_like(state.phi)
        dpsi = np.zeros_like(state.psi)
        if directions in ("phi", "mixed"):
            raw = np.stack([fl._fourier_scalar(ch, rng, 2, 1.0)
                            for _ in range(state.K)], axis=-1) * win
            dphi = state.target.tangent_project(state.phi, raw)
        if directions in ("psi", "mixed"):
            raw = np.stack([np.stack([fl._fourier_scalar(ch, rng, 2, 1.0)
                                      for _ in range(4)], axis=-1)
                            for _ in range(state.K)], axis=-2) * win[..., None]
            dpsi = raw - n[..., None] * np.einsum("xyk,xykc->xyc", n, raw)[..., None, :]
        scale = max(np.max(np.abs(dphi)), np.max(np.abs(dpsi)), 1e-12)
        t = 1e-5 / scale

        def at(tt):
            st = state.copy()
            st.phi = state.phi + tt * dphi
            st.psi = state.psi + tt * dpsi
            return fl.action(st.project())

        dA = (at(t) - at(-t)) / (2 * t)
        bd = np.einsum("xyjk,xyk->xyj", B, dphi)
        dpsi_ind = n[..., :, None] * np.einsum("xyk,xykc->xyc", bd, state.psi)[..., None, :]
        pairing = (-2.0 * np.einsum("xy,xyk,xyk->", w, rphi, dphi)
                   + 2.0 * np.einsum("xy,xykc,xykc->", w, rpsi, dpsi + dpsi_ind))
        rel = abs(dA - pairing) / max(abs(dA), abs(pairing), 1e-14)
        worst = max(worst, rel)
    return worst


# -- relaxation flow and the energy-gap experiment ---------------------------


def heat_flow(state, steps: int = 2000, tau: float = 0.1,
              e_stop: float = 5e-7, monitor_every: int = 25):
    """Semi-implicit harmonic-map heat flow with the conformal factor:
    d phi / dt = e^{-2u} (Delta phi - A(grad phi, grad phi)); Dirichlet
    boundary held fixed.  Used by the gap experiment (psi = chi = 0)."""
    state = state.project()
    ch = state.chart
    K = state.K
    idx = _valid_index(ch)
    inter = ch.interior[ch.mask]
    wgt = np.exp(-2.0 * ch.u)[ch.mask]
    lap = lap5_matrix(ch)
    nv = int(ch.mask.sum())
    A = (sp.eye(nv, format="csr") - tau * sp.diags(wgt) @ lap).tolil()
    bnd = ~inter
    for irow in np.where(bnd)[0]:
        A.rows[irow] = [irow]
        A.data[irow] = [1.0]
    lu = spla.splu(A.tocsc())

    phi = state.phi.copy()
    energy = np.inf
    hist = []
    for step in range(steps):
        st = fl.FieldState(ch, state.target, phi, state.psi, state.chi)
        n = state.target.unit_normal(phi[ch.mask])
        B = state.target.bform(phi[ch.mask])
        dphi = gr.grad(ch, phi)
        a_grad = np.einsum("xyai,xyij,xyaj->xy", dphi,
                           _embed(ch, B, K), dphi)[ch.mask]
        rhs_nl = -(n * a_grad[:, None]) * wgt[:, None] * tau
        rhs = phi[ch.mask] + np.where(inter[:, None], rhs_nl, 0.0)
        rhs[bnd] = phi[ch.mask][bnd]
        new = np.empty_like(rhs)
        for k in range(K):
            new[:, k] = lu.solve(rhs[:, k])
        vals = state.target.closest_point(new)
        phi_new = phi.copy()
        phi_new[ch.mask] = vals
        phi = phi_new
        if (step + 1) % monitor_every == 0 or step == steps - 1:
            st = fl.FieldState(ch, state.target, phi, state.psi, state.chi)
            e_phi, _ = fl.energies(st)
            hist.append(e_phi)
            if e_phi < e_stop:
                break
            if abs(energy - e_phi) < 1e-10 * (1 + e_phi):
                break
            energy = e_phi
    final = fl.FieldState(ch, state.target, phi, state.psi, state.chi).project()
    return final, hist


def _embed(ch, Bm, K):
    out = np.zeros(ch.mask.shape + (K, K))
    out[ch.mask] = Bm
    return out


def capped_bubble_state(chart, target, amplitude: float, lam: float = 1.0,
                        r_on: float = 0.5, r_off: float = 0.75):
    """North-pole map opened toward the degree-1 bubble by ``amplitude``,
    with a smooth radial cutoff so the boundary trace is exactly constant."""
    r = np.hypot(chart.X, chart.Y)
    rmax = np.max(r[chart.mask])
    s = np.clip((r / rmax - r_on) / (r_off - r_on), 0.0, 1.0)
    cut = (1 - s) ** 3 * (1 + 3 * s)
    K = target.K
    p_inf = np.zeros(K)
    p_inf[2] = 1.0
    phi_b = np.zeros(chart.mask.shape + (K,))
    phi_b[..., :3] = fl.bubble_map(chart, lam)
    mix = amplitude * cut
    phi = p_inf + mix[..., None] * (phi_b - p_inf)
    psi = np.zeros(chart.mask.shape + (K, 4))
    chi = np.zeros(chart.mask.shape + (2, 4))
    return fl.FieldState(chart, target, phi, psi, chi).project()


def gap_experiment(amplitudes, n: int = 97, radius: float = 20.0,
                   target=None, steps: int = 3000, tau: float = 0.15,
                   trivial_tol: float = 1e-6):
    """Relax the amplitude ladder on the stereographic sphere chart with
    chi = 0 and report the observed triviality threshold.

    The reported threshold is an observed numerical quantity; it does not
    approximate the paper's existence constant.
    """
    if target is None:
        target = sphere(3, 1.0)
    chart = gr.stereographic_chart(radius, n)
    rows = []
    for a in amplitudes:
        st = capped_bubble_state(chart, target, a)
        final, hist = heat_flow(st, steps=steps, tau=tau, e_stop=0.5 * trivial_tol)
        e_phi, e_psi = fl.energies(final)
        rows.append({"amplitude": float(a), "E_phi": e_phi, "E_psi": e_psi,
                     "trivial": bool(e_phi <= trivial_tol)})
    trivial = [r["amplitude"] for r in rows if r["trivial"]]
    threshold = max(trivial) if trivial else None
    return {
        "rows": rows,
        "observed_threshold": threshold,
        "caveat": ("observed numerical threshold only; not the paper's "
                   "energy-gap constant"),
    }


# -- self-consistent critical gravitino --------------------------------------


def solve_with_critical_gravitino(state, opts: SolveOptions | None = None,
                                  cycles: int = 4, floor: float = 0.0):
    """Alternate chi <- critical gravitino of (phi, psi) with full solves at
    frozen chi.  Returns (state, reports, supercurrent history)."""
    reports = []
    j_hist = []
    st = state
    for _ in range(cycles):
        chi = fl.critical_gravitino(st, floor=floor)
        st = fl.FieldState(st.chart, st.target, st.phi, st.psi, chi).project()
        st, rep = solve(st, opts)
        reports.append(rep)
        j_hist.append(fl.supercurrent_norm(st))
        if j_hist[-1] < 1e-10:
            break
    return st, reports, j_hist
