"""Flat-chart discretization: rectangular grids over disks, annuli,
rectangles and cylinders, finite-difference stencils, quadrature,
circle integrals, and the conformal/dilation changes of variables.

Grid convention: arrays are indexed ``f[ix, iy]`` with
``x = x0 + ix*hx``, ``y = y0 + iy*hy``; fiber components live on
trailing axes.  Nodes outside the domain are masked; operators return 0
there.  Interior nodes (full 5-point stencil) use central differences,
boundary nodes one-sided second-order stencils.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CircleOutOfDomain, GridTooSmall


@dataclass
class Chart:
    kind: str
    nx: int
    ny: int
    x0: float
    y0: float
    hx: float
    hy: float
    mask: np.ndarray
    periodic: tuple[bool, bool] = (False, False)
    u: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    # sign picked up by spinor-bundle sections on wrapping a periodic axis
    # (-1 = nontrivial/antiperiodic spin structure along that axis)
    spin_flip: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if min(self.nx, self.ny) < 5:
            raise GridTooSmall("need at least 5 points per axis")
        if self.u is None:
            self.u = np.zeros((self.nx, self.ny))

    @cached_property
    def x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.y0 + self.hy * np.arange(self.ny)

    @cached_property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.x[:, None], (self.nx, self.ny)).copy()

    @cached_property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.y[None, :], (self.nx, self.ny)).copy()

    @cached_property
    def interior(self) -> np.ndarray:
        """Nodes with a full 5-point stencil of valid neighbors."""
        ok = self.mask.copy()
        for axis in (0, 1):
            for k in (-1, 1):
                ok &= _shift_mask(self, axis, k)
        return ok

    @cached_property
    def boundary(self) -> np.ndarray:
        return self.mask & ~self.interior

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Trapezoid cell weights; masked nodes excluded."""
        w = np.where(self.mask, self.hx * self.hy, 0.0)
        if not self.periodic[0]:
            w[0, :] *= 0.5
            w[-1, :] *= 0.5
        if not self.periodic[1]:
            w[:, 0] *= 0.5
            w[:, -1] *= 0.5
        return w

    def interior_margin(self, cells: int) -> np.ndarray:
        """Valid nodes at graph distance > ``cells`` from any masked node."""
        ok = self.mask.copy()
        for _ in range(cells):
            nxt = ok.copy()
            for axis in (0, 1):
                for k in (-1, 1):
                    nxt &= _shift_bool(self, ok, axis, k)
            ok = nxt
        return ok

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "n": [self.nx, self.ny],
            "origin": [self.x0, self.y0],
            "spacing": [self.hx, self.hy],
            "periodic": list(self.periodic),
            "params": {k: (list(v) if isinstance(v, (tuple, list)) else v)
                       for k, v in self.params.items()},
        }


def _shift_mask(chart: Chart, axis: int, k: int) -> np.ndarray:
    return _shift_bool(chart, chart.mask, axis, k)


def _shift_bool(chart: Chart, m: np.ndarray, axis: int, k: int) -> np.ndarray:
    """m at index i+k along axis (False past non-periodic edges)."""
    out = np.roll(m, -k, axis=axis)
    if not chart.periodic[axis]:
        sl = [slice(None)] * 2
        sl[axis] = slice(k, None) if k < 0 else slice(-k, None) if k > 0 else slice(None)
        if k > 0:
            sl[axis] = slice(m.shape[axis] - k, None)
        elif k < 0:
            sl[axis] = slice(0, -k)
        out[tuple(sl)] = False
    return out


# -- chart constructors -------------------------------------------------

def rectangle_chart(x_range, y_range, n) -> Chart:
    nx, ny = (n, n) if np.isscalar(n) else n
    x0, x1 = x_range
    y0, y1 = y_range
    return Chart("rectangle", nx, ny, x0, y0,
                 (x1 - x0) / (nx - 1), (y1 - y0) / (ny - 1),
                 np.ones((nx, ny), dtype=bool),
                 params={"x_range": (x0, x1), "y_range": (y0, y1)})


def torus_chart(x_range, y_range, n, antiperiodic: bool = True) -> Chart:
    """Fully periodic rectangle (flat torus): no boundary nodes, so the
    first-order spinor problem needs no boundary data.

    By default the spin structure is the nontrivial (antiperiodic) one in
    both directions, which admits no harmonic spinors; with even point
    counts the central-difference doubler modes are gapped as well.
    """
    nx, ny = (n, n) if np.isscalar(n) else n
    x0, x1 = x_range
    y0, y1 = y_range
    s = -1 if antiperiodic else 1
    return Chart("torus", nx, ny, x0, y0,
                 (x1 - x0) / nx, (y1 - y0) / ny,
                 np.ones((nx, ny), dtype=bool),
                 periodic=(True, True),
                 params={"x_range": (x0, x1), "y_range": (y0, y1),
                         "antiperiodic": antiperiodic},
                 spin_flip=(s, s))


def disk_chart(radius: float, n: int, stereographic: bool = False) -> Chart:
    h = 2 * radius / (n - 1)
    x = -radius + h * np.arange(n)
    r2 = x[:, None] ** 2 + x[None, :] ** 2
    mask = r2 <= radius**2 * (1 + 1e-12)
    u = 0.5 * np.log((2.0 / (1.0 + r2)) ** 2) if stereographic else None
    return Chart("disk", n, n, -radius, -radius, h, h, mask, u=u,
                 params={"radius": radius, "stereographic": stereographic})


def stereographic_chart(radius: float = 20.0, n: int = 129) -> Chart:
    """Flat chart of the round sphere: metric e^{2u} delta, u = log(2/(1+r^2))."""
    return disk_chart(radius, n, stereographic=True)


def annulus_chart(r_in: float, r_out: float, n: int) -> Chart:
    c = disk_chart(r_out, n)
    r2 = c.X**2 + c.Y**2
    c.mask &= r2 >= r_in**2 * (1 - 1e-12)
    c.kind = "annulus"
    c.params = {"r_in": r_in, "r_out": r_out}
    return c


def cylinder_chart(t_range, nt: int, ntheta: int) -> Chart:
    """(t, theta) grid, periodic in theta; flat metric dt^2 + dtheta^2."""
    t0, t1 = t_range
    return Chart("cylinder", nt, ntheta, t0, 0.0,
                 (t1 - t0) / (nt - 1), 2 * np.pi / ntheta,
                 np.ones((nt, ntheta), dtype=bool),
                 periodic=(False, True),
                 params={"t_range": (t0, t1)})


# -- finite differences -------------------------------------------------

def _shift_vals(chart: Chart, f: np.ndarray, axis: int, k: int,
                spin: bool = False) -> np.ndarray:
    """Field value at index i+k; wrapped entries pick up the spin-structure
    sign when shifting spinor-valued fields."""
    out = np.roll(f, -k, axis=axis)
    if spin and chart.periodic[axis] and chart.spin_flip[axis] < 0:
        sl = [slice(None)] * out.ndim
        n = f.shape[axis]
        sl[axis] = slice(n - k, None) if k > 0 else slice(0, -k)
        out[tuple(sl)] = -out[tuple(sl)]
    return out


def diff(chart: Chart, f: np.ndarray, axis: int, spin: bool = False) -> np.ndarray:
    """First derivative along an axis: 2nd-order central in the interior,
    2nd-order one-sided at boundaries, first-order where only one
    neighbor exists.  Zero on masked nodes.  ``spin=True`` applies the
    spin-structure sign on periodic wraps (spinor-valued fields)."""
    f = np.asarray(f, dtype=float)
    trail = f.shape[2:]
    g = f.reshape(chart.nx, chart.ny, -1)
    h = chart.hx if axis == 0 else chart.hy

    m = chart.mask
    mP = _shift_mask(chart, axis, 1)
    mM = _shift_mask(chart, axis, -1)
    mPP = _shift_mask(chart, axis, 2)
    mMM = _shift_mask(chart, axis, -2)
    fP = _shift_vals(chart, g, axis, 1, spin)
    fM = _shift_vals(chart, g, axis, -1, spin)
    fPP = _shift_vals(chart, g, axis, 2, spin)
    fMM = _shift_vals(chart, g, axis, -2, spin)

    out = np.zeros_like(g)
    sel = (mP & mM)[..., None]
    out = np.where(sel, (fP - fM) / (2 * h), out)
    sel_f = (~mM & mP & mPP)[..., None]
    out = np.where(sel_f, (-3 * g + 4 * fP - fPP) / (2 * h), out)
    sel_b = (~mP & mM & mMM)[..., None]
    out = np.where(sel_b, (3 * g - 4 * fM + fMM) / (2 * h), out)
    sel_f1 = (~mM & mP & ~mPP)[..., None]
    out = np.where(sel_f1, (fP - g) / h, out)
    sel_b1 = (~mP & mM & ~mMM)[..., None]
    out = np.where(sel_b1, (g - fM) / h, out)
    out *= m[..., None]
    return out.reshape(f.shape[:2] + trail)


def grad(chart: Chart, f: np.ndarray, spin: bool = False) -> np.ndarray:
    """Stacked (d_x f, d_y f) along a new axis 2."""
    return np.stack([diff(chart, f, 0, spin), diff(chart, f, 1, spin)], axis=2)


def laplacian(chart: Chart, f: np.ndarray) -> np.ndarray:
    """Composition of the first-derivative stencils (discrete adjoint pair
    with the quadratic action, which is what the gradient check needs)."""
    return (diff(chart, diff(chart, f, 0), 0)
            + diff(chart, diff(chart, f, 1), 1))


def divergence(chart: Chart, v: np.ndarray) -> np.ndarray:
    """Divergence of a field carrying the 2-vector on axis 2."""
    return diff(chart, v[:, :, 0], 0) + diff(chart, v[:, :, 1], 1)


# -- quadrature ---------------------------------------------------------

def integrate(chart: Chart, f: np.ndarray, weighted: bool = True,
              region_w: np.ndarray | None = None) -> float:
    """Trapezoidal sum; ``weighted`` multiplies by the metric area factor
    e^{2u} (a no-op on flat charts)."""
    w = chart.quad_weights if region_w is None else region_w
    dens = np.asarray(f, dtype=float)
    if weighted:
        dens = dens * np.exp(2.0 * chart.u)
    return float(np.einsum("ij,ij->", w, dens))


def region_weights(chart: Chart, region) -> np.ndarray:
    """Quadrature weights restricted to a disk/annulus region.

    Rim cells get fractional weights from 4x4 subcell sampling so
    complementary regions stay exactly additive.
    """
    w = chart.quad_weights.copy()
    if region is None:
        return w
    kind = region[0]
    if kind == "disk":
        _, cx, cy, r1 = region
        r0 = -1.0
    elif kind == "annulus":
        _, cx, cy, r0, r1 = region
    else:
        raise ValueError(f"unknown region kind {kind!r}")
    d = np.hypot(chart.X - cx, chart.Y - cy)
    inside = (d >= r0) & (d <= r1)
    h = max(chart.hx, chart.hy)
    rim = (np.abs(d - r1) <= h) | (np.abs(d - r0) <= h)
    frac = inside.astype(float)
    if np.any(rim):
        s = 4
        offs = (np.arange(s) + 0.5) / s - 0.5
        ox, oy = np.meshgrid(offs * chart.hx, offs * chart.hy, indexing="ij")
        xs = chart.X[rim][:, None, None] + ox[None]
        ys = chart.Y[rim][:, None, None] + oy[None]
        ds = np.hypot(xs - cx, ys - cy)
        frac[rim] = ((ds >= r0) & (ds <= r1)).mean(axis=(1, 2))
    return w * frac


# -- interpolation and circle quadrature --------------------------------

def _cr_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic weights for the 4-node stencil around t in [0,1]."""
    t2, t3 = t * t, t * t * t
    return np.stack([
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    ], axis=-1)


def interp(chart: Chart, f: np.ndarray, xq, yq, method: str = "cubic"):
    """Interpolate nodal values at query points (bicubic Catmull-Rom with
    bilinear fallback near edges).  Raises CircleOutOfDomain when a query
    point has no valid stencil."""
    f = np.asarray(f, dtype=float)
    xq = np.atleast_1d(np.asarray(xq, dtype=float))
    yq = np.atleast_1d(np.asarray(yq, dtype=float))
    trail = f.shape[2:]
    g = f.reshape(chart.nx, chart.ny, -1)
    ncomp = g.shape[2]

    gx = (xq - chart.x0) / chart.hx
    gy = (yq - chart.y0) / chart.hy

    def wrap(idx, n, periodic):
        return np.mod(idx, n) if periodic else idx

    out = np.zeros(xq.shape + (ncomp,))
    ok = np.zeros(xq.shape, dtype=bool)

    if method == "cubic":
        ix = np.floor(gx).astype(int)
        iy = np.floor(gy).astype(int)
        tx = gx - ix
        ty = gy - iy
        offs = np.arange(-1, 3)
        ii = ix[..., None] + offs
        jj = iy[..., None] + offs
        in_x = chart.periodic[0] | ((ii >= 0) & (ii <= chart.nx - 1)).all(axis=-1)
        in_y = chart.periodic[1] | ((jj >= 0) & (jj <= chart.ny - 1)).all(axis=-1)
        cand = in_x & in_y
        ii = wrap(np.clip(ii, -chart.nx, chart.nx - 1) if not chart.periodic[0] else ii,
                  chart.nx, chart.periodic[0])
        jj = wrap(np.clip(jj, -chart.ny, chart.ny - 1) if not chart.periodic[1] else jj,
                  chart.ny, chart.periodic[1])
        ii = np.clip(ii, 0, chart.nx - 1)
        jj = np.clip(jj, 0, chart.ny - 1)
        valid16 = chart.mask[ii[..., :, None], jj[..., None, :]].all(axis=(-1, -2))
        use = cand & valid16
        if np.any(use):
            wx = _cr_weights(tx[use])
            wy = _cr_weights(ty[use])
            vals = g[ii[use][:, :, None], jj[use][:, None, :], :]
            out[use] = np.einsum("pa,pb,pabc->pc", wx, wy, vals)
            ok[use] = True

    # bilinear pass for what remains (or when requested)
    rem = ~ok
    if np.any(rem):
        gxr, gyr = gx[rem], gy[rem]
        ix = np.floor(gxr).astype(int)
        iy = np.floor(gyr).astype(int)
        if not chart.periodic[0]:
            ix = np.clip(ix, 0, chart.nx - 2)
        if not chart.periodic[1]:
            iy = np.clip(iy, 0, chart.ny - 2)
        tx = gxr - ix
        ty = gyr - iy
        inside = (tx >= -1e-9) & (tx <= 1 + 1e-9) & (ty >= -1e-9) & (ty <= 1 + 1e-9)
        i0 = wrap(ix, chart.nx, chart.periodic[0])
        i1 = wrap(ix + 1, chart.nx, chart.periodic[0])
        j0 = wrap(iy, chart.ny, chart.periodic[1])
        j1 = wrap(iy + 1, chart.ny, chart.periodic[1])
        valid4 = (chart.mask[i0, j0] & chart.mask[i1, j0]
                  & chart.mask[i0, j1] & chart.mask[i1, j1])
        good = inside & valid4
        if not np.all(good):
            raise CircleOutOfDomain("interpolation point outside the chart domain")
        v00 = g[i0, j0]
        v10 = g[i1, j0]
        v01 = g[i0, j1]
        v11 = g[i1, j1]
        tx = tx[:, None]
        ty = ty[:, None]
        out[rem] = ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
                    + (1 - tx) * ty * v01 + tx * ty * v11)

    return out.reshape(xq.shape + trail)


def circle_samples(chart: Chart, f: np.ndarray, r: float, center=(0.0, 0.0),
                   m: int | None = None, method: str = "cubic"):
    """Values of a nodal field at m uniform points of a circle."""
    if m is None:
        m = 4 * max(chart.nx, chart.ny)
    theta = 2 * np.pi * np.arange(m) / m
    xs = center[0] + r * np.cos(theta)
    ys = center[1] + r * np.sin(theta)
    return theta, interp(chart, f, xs, ys, method=method)


def circle_integral(chart: Chart, f: np.ndarray, r: float, center=(0.0, 0.0),
                    m: int | None = None) -> float:
    """Trapezoidal theta-quadrature of a scalar field over a circle."""
    theta, vals = circle_samples(chart, f, r, center, m)
    return float(vals.sum() * (2 * np.pi / len(theta)))


# -- conformal changes of variables -------------------------------------

def conformal_rescale(state, lam: float, x0=(0.0, 0.0)):
    """Dilation change of variables with the flat-chart field weights:
    phi~(x) = phi(x0 + lam x), psi~ = lam^{1/2} psi(x0 + lam x),
    chi~ = lam^{1/2} chi(x0 + lam x); bilinear resampling."""
    from .fields import FieldState

    if lam <= 0:
        raise ValueError("dilation factor must be positive")
    ch = state.chart
    x0 = np.asarray(x0, dtype=float)
    if ch.kind in ("disk", "annulus"):
        radius = ch.params.get("radius", ch.params.get("r_out"))
        new_r = (radius - float(np.hypot(*x0))) / lam
        if new_r <= 0:
            raise CircleOutOfDomain("rescale center too close to the chart edge")
        new_chart = disk_chart(new_r, ch.nx)
    elif ch.kind == "rectangle":
        (a, b) = ch.params["x_range"]
        (c, d) = ch.params["y_range"]
        new_chart = rectangle_chart(((a - x0[0]) / lam, (b - x0[0]) / lam),
                                    ((c - x0[1]) / lam, (d - x0[1]) / lam),
                                    (ch.nx, ch.ny))
    else:
        raise ValueError(f"cannot rescale a {ch.kind} chart")

    xs = x0[0] + lam * new_chart.X[new_chart.mask]
    ys = x0[1] + lam * new_chart.Y[new_chart.mask]

    def pull(fld, weight):
        vals = interp(ch, fld, xs, ys, method="linear")
        out = np.zeros(new_chart.mask.shape + fld.shape[2:])
        out[new_chart.mask] = weight * vals
        return out

    root = np.sqrt(lam)
    phi = pull(state.phi, 1.0)
    psi = pull(state.psi, root)
    chi = pull(state.chi, root)
    u = pull(state.chart.u, 1.0) + np.log(lam)
    new_chart.u = np.where(new_chart.mask, u, 0.0)
    return FieldState(new_chart, state.target, phi, psi, chi).project()


def cylinder_transform(state, center, t_range, nt: int | None = None,
                       ntheta: int | None = None):
    """Log-polar change of variables f(t, theta) = (e^{-t}, theta) around a
    center, with the conformal spinor/gravitino weights e^{-t/2}.

    Gravitino components are returned in the cylinder's orthonormal
    coordinate frame (d_t, d_theta); the spinor leg keeps the Cartesian
    trivialization (norms, hence all energies, are frame-independent).
    """
    from .fields import FieldState

    t0, t1 = t_range
    if t1 <= t0:
        raise ValueError("need T0 < T1")
    ch = state.chart
    if nt is None:
        nt = ch.nx
    if ntheta is None:
        ntheta = 2 * (max(ch.nx, ch.ny) // 2) + 64
    new_chart = cylinder_chart((t0, t1), nt, ntheta)

    t = new_chart.X
    theta = new_chart.Y
    r = np.exp(-t)
    xs = center[0] + r * np.cos(theta)
    ys = center[1] + r * np.sin(theta)

    phi = interp(ch, state.phi, xs.ravel(), ys.ravel(), method="linear")
    psi = interp(ch, state.psi, xs.ravel(), ys.ravel(), method="linear")
    chi = interp(ch, state.chi, xs.ravel(), ys.ravel(), method="linear")
    phi = phi.reshape((nt, ntheta) + state.phi.shape[2:])
    psi = psi.reshape((nt, ntheta) + state.psi.shape[2:])
    chi = chi.reshape((nt, ntheta) + state.chi.shape[2:])

    wt = np.exp(-0.5 * t)
    psi = psi * wt[..., None, None]
    cos = np.cos(theta)[..., None]
    sin = np.sin(theta)[..., None]
    chi_r = cos * chi[..., 0, :] + sin * chi[..., 1, :]
    chi_th = -sin * chi[..., 0, :] + cos * chi[..., 1, :]
    chi_cyl = np.stack([-chi_r, chi_th], axis=-2) * wt[..., None, None]

    u = interp(ch, ch.u, xs.ravel(), ys.ravel(), method="linear").reshape(nt, ntheta)
    new_chart.u = u - t
    return FieldState(new_chart, state.target, phi, psi, chi_cyl).project()


# -- field snapshots -----------------------------------------------------

def write_snapshot(path, chart: Chart, fields: dict) -> None:
    """Text JSON header + little-endian float64 payload per field."""
    names = list(fields)
    header = {
        "chart": chart.descriptor(),
        "fields": names,
        "shapes": {k: list(np.asarray(fields[k]).shape) for k in names},
        "endianness": "little",
        "dtype": "float64",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for k in names:
            arr = np.ascontiguousarray(np.asarray(fields[k], dtype="<f8"))
            fh.write(arr.tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        chart = chart_from_descriptor(header["chart"])
        fields = {}
        for k in header["fields"]:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            fields[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return chart, fields


def chart_from_descriptor(desc: dict) -> Chart:
    kind = desc["kind"]
    p = desc["params"]
    n = desc["n"]
    if kind == "disk":
        return disk_chart(p["radius"], n[0], stereographic=p.get("stereographic", False))
    if kind == "annulus":
        return annulus_chart(p["r_in"], p["r_out"], n[0])
    if kind == "rectangle":
        return rectangle_chart(tuple(p["x_range"]), tuple(p["y_range"]), tuple(n))
    if kind == "torus":
        return torus_chart(tuple(p["x_range"]), tuple(p["y_range"]), tuple(n))
    if kind == "cylinder":
        return cylinder_chart(tuple(p["t_range"]), n[0], n[1])
    raise ValueError(f"unknown chart kind {kind!r}")
