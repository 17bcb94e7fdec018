"""Metric families on 2-D charts with strictly convex boundary.

Built-in families are closed form (flat disk, conformal disk, hyperbolic
cylinder); grid metrics interpolate tabulated node data.  All pointwise
differential-geometric evaluators live here; the compiled counterparts used
by the flow integrator are in ``_kernels``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels as K
from .errors import ConfigParse, NotSPD, OutOfChart, TangentialEntry


def spline_coefficients(data, periodic_y=False):
    """Cubic B-spline prefilter of per-component node data (nx, ny, ncomp)."""
    out = np.empty_like(data, dtype=float)
    for c in range(data.shape[2]):
        tmp = ndimage.spline_filter1d(data[:, :, c], order=3, axis=0,
                                      mode="mirror")
        out[:, :, c] = ndimage.spline_filter1d(
            tmp, order=3, axis=1, mode="grid-wrap" if periodic_y else "mirror")
    return np.ascontiguousarray(out)

FLAT = 0
CONFORMAL = 1
CYLINDER = 2
GRID = 3

_FAMILY_NAMES = {FLAT: "flat_disk", CONFORMAL: "conformal_disk",
                 CYLINDER: "hyperbolic_cylinder", GRID: "grid_metric"}


@dataclass(frozen=True)
class Geometry:
    """Immutable metric family on a disk or cylinder chart."""

    code: int
    params: np.ndarray
    grid_data: np.ndarray = field(default_factory=lambda: K._EMPTY_GRID)
    bumps: np.ndarray = field(default_factory=lambda: K._EMPTY_BUMPS)
    extension_margin: float = 0.25

    # ---- chart descriptors -------------------------------------------------

    @property
    def family(self):
        return _FAMILY_NAMES[self.code]

    @property
    def chart_kind(self):
        return "cylinder" if self.code == CYLINDER else "disk"

    @property
    def chart_radius(self):
        """Half-width a for the cylinder, disk radius otherwise."""
        return float(self.params[0])

    @property
    def hull_factor(self):
        return 1.0 + self.extension_margin + 1e-9

    def geometry_id(self):
        bits = [self.family, repr(self.params.tolist())]
        if self.bumps.size:
            bits.append(repr(np.asarray(self.bumps).tolist()))
        return "|".join(bits)

    def extended(self):
        """Same family evaluated on the chart enlarged by the extension margin."""
        if self.code == GRID:
            raise OutOfChart("grid metrics carry no closed-form extension")
        par = self.params.copy()
        par[0] = par[0] * (1.0 + self.extension_margin)
        return Geometry(self.code, par, self.grid_data, self.bumps,
                        extension_margin=1e-6)

    def with_bumps(self, bumps):
        """Attach tensor bump perturbations (rows per ``_kernels`` layout)."""
        b = np.atleast_2d(np.asarray(bumps, dtype=float))
        if b.shape[1] != 10:
            raise ConfigParse("bump rows must have 10 entries")
        if self.code == CYLINDER:
            lth = self.params[1]
            for row in b:
                if int(row[0]) == 1:
                    # the angular wavevector must respect the chart period
                    k = row[3] * lth / (2.0 * math.pi)
                    if abs(k - round(k)) > 1e-9:
                        raise ConfigParse(
                            "cylinder bump wavevector must be periodic: "
                            f"k_theta*L/(2 pi) = {k} is not an integer")
                else:
                    if row[3] - row[4] < 0.0 or row[3] + row[4] > lth:
                        raise ConfigParse(
                            "compact cylinder bump must not cross the "
                            "theta = 0 chart seam")
        else:
            R = self.params[0]
            for row in b:
                if int(row[0]) in (0, 2):
                    # compact supports must stay inside M so the boundary
                    # parametrization and entry frames are unchanged
                    if math.hypot(row[2], row[3]) + row[4] > R * (1 - 1e-12):
                        raise ConfigParse(
                            "compact bump support must stay strictly inside "
                            "the chart disk")
        allb = np.vstack([self.bumps, b]) if self.bumps.size else b
        return Geometry(self.code, self.params, self.grid_data, allb,
                        self.extension_margin)

    # ---- pointwise evaluators ----------------------------------------------

    def _check_chart(self, x, extended=False):
        hull = self.hull_factor if extended else 1.0 + 1e-12
        if not K._in_hull(self.code, self.params, x[0], x[1], hull):
            raise OutOfChart(f"point {tuple(x)} outside chart of {self.family}")

    def metric_at(self, x, extended=False):
        """Metric matrix, its inverse, and sqrt(det g) at chart point x."""
        x = np.asarray(x, dtype=float)
        self._check_chart(x, extended)
        g11, g12, g22 = K._metric(self.code, self.params, self.grid_data,
                                  self.bumps, x[0], x[1])
        det = g11 * g22 - g12 * g12
        tr = g11 + g22
        # smallest eigenvalue of a symmetric 2x2
        lam_min = 0.5 * (tr - math.sqrt(max(tr * tr - 4.0 * det, 0.0)))
        if lam_min <= 0.0:
            raise NotSPD(f"metric not positive definite at {tuple(x)}")
        g = np.array([[g11, g12], [g12, g22]])
        g_inv = np.array([[g22, -g12], [-g12, g11]]) / det
        return g, g_inv, math.sqrt(det)

    def christoffel_at(self, x, extended=False):
        """Christoffel symbols Gamma[k, i, j], symmetric in (i, j)."""
        x = np.asarray(x, dtype=float)
        self._check_chart(x, extended)
        G = K._christoffel(self.code, self.params, self.grid_data, self.bumps,
                           x[0], x[1])
        out = np.empty((2, 2, 2))
        out[0, 0, 0] = G[0]
        out[0, 0, 1] = out[0, 1, 0] = G[1]
        out[0, 1, 1] = G[2]
        out[1, 0, 0] = G[3]
        out[1, 0, 1] = out[1, 1, 0] = G[4]
        out[1, 1, 1] = G[5]
        return out

    def gauss_curvature_at(self, x, extended=False):
        x = np.asarray(x, dtype=float)
        self._check_chart(x, extended)
        return K._curvature(self.code, self.params, self.grid_data, self.bumps,
                            x[0], x[1])

    def sqrt_det_at(self, x):
        return self.metric_at(x, extended=True)[2]

    def inner(self, x, u, v):
        g, _, _ = self.metric_at(x, extended=True)
        return float(u @ g @ v)

    def norm(self, x, v):
        return math.sqrt(max(self.inner(x, v, v), 0.0))

    def unit_frame_at(self, x):
        """g-orthonormal frame (e1, e2) aligned with the chart axes."""
        g, _, _ = self.metric_at(x, extended=True)
        g11, g12, g22 = g[0, 0], g[0, 1], g[1, 1]
        det = g11 * g22 - g12 * g12
        e1 = np.array([1.0 / math.sqrt(g11), 0.0])
        fac = math.sqrt(g11 / det)
        e2 = np.array([-g12 / g11 * fac, fac])
        return e1, e2

    def rho(self, x):
        """Boundary defining function (> 0 inside, 0 on the boundary)."""
        return K._rho(self.code, self.params, x[0], x[1])

    # ---- boundary parametrization ------------------------------------------

    def boundary_components(self):
        """List of (s_start, length) per boundary component."""
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            lc = math.cosh(a) * lth
            return [(0.0, lc), (lc, lc)]
        return [(0.0, self._disk_boundary_length())]

    def _disk_boundary_length(self):
        R = self.params[0]
        if self.code in (FLAT, CONFORMAL):
            # conformal factor is 1 on the boundary circle by construction
            return 2.0 * math.pi * R
        tab = self._arclength_table()
        return float(tab[1][-1])

    def _arclength_table(self, n=2048):
        """Cumulative arclength of the boundary circle for grid metrics."""
        R = self.params[0]
        u = np.linspace(0.0, 2.0 * math.pi, n + 1)
        pts = np.stack([R * np.cos(u), R * np.sin(u)], axis=1)
        speeds = np.empty(n + 1)
        for i, p in enumerate(pts):
            g, _, _ = self.metric_at(p, extended=True)
            t = np.array([-math.sin(u[i]), math.cos(u[i])])
            speeds[i] = R * math.sqrt(t @ g @ t)
        s = np.concatenate([[0.0], np.cumsum(0.5 * (speeds[1:] + speeds[:-1])
                                             * np.diff(u))])
        return u, s

    @property
    def boundary_length(self):
        return sum(c[1] for c in self.boundary_components())

    def boundary_point(self, s):
        """Chart point, unit tangent, and inward unit normal at arclength s."""
        s = float(s) % self.boundary_length
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            lc = math.cosh(a) * lth
            if s < lc:
                th = s / math.cosh(a)
                x = np.array([a, th])
                tang = np.array([0.0, 1.0 / math.cosh(a)])
                nu_in = np.array([-1.0, 0.0])
            else:
                th = -(s - lc) / math.cosh(a)
                x = np.array([-a, th % lth])
                tang = np.array([0.0, -1.0 / math.cosh(a)])
                nu_in = np.array([1.0, 0.0])
            return x, tang, nu_in
        R = self.params[0]
        if self.code in (FLAT, CONFORMAL):
            u = s / R
        else:
            utab, stab = self._arclength_table()
            u = float(np.interp(s, stab, utab))
        x = np.array([R * math.cos(u), R * math.sin(u)])
        t_raw = np.array([-math.sin(u), math.cos(u)])
        tang = t_raw / self.norm(x, t_raw)
        # inward normal: annihilated by the tangent covector, oriented inside
        g, _, _ = self.metric_at(x, extended=True)
        tcov = g @ tang
        nu = np.array([-tcov[1], tcov[0]])
        nu = nu / self.norm(x, nu)
        if nu @ (-x) < 0:
            nu = -nu
        return x, tang, nu

    def boundary_frame(self, s):
        x, tang, nu_in = self.boundary_point(s)
        # second fundamental form of the boundary with respect to nu_in
        ds = 1e-6 * max(1.0, self.boundary_length / (2 * math.pi))
        _, t_p, _ = self.boundary_point(s + ds)
        _, t_m, _ = self.boundary_point(s - ds)
        dT = (t_p - t_m) / (2.0 * ds)
        Gam = self.christoffel_at(x, extended=True)
        cov = dT + np.einsum("kij,i,j->k", Gam, tang, tang)
        II = self.inner(x, cov, nu_in)
        return BoundaryFrame(s=float(s), point=x, tangent=tang, nu_in=nu_in,
                             II=float(II))

    def phase_from_boundary(self, s, theta):
        """Inward phase point for entry angle theta measured from the inward normal."""
        if abs(theta) >= math.pi / 2:
            raise TangentialEntry(f"|theta| = {abs(theta)} >= pi/2")
        x, tang, nu_in = self.boundary_point(s)
        v = math.cos(theta) * nu_in + math.sin(theta) * tang
        return PhasePoint(x=x, v=v, geometry_id=self.geometry_id()), math.cos(theta)

    def boundary_coords_of(self, x, v, inward=False):
        """Boundary coordinates (s, theta) of a boundary phase point.

        With ``inward=False`` the angle is measured from the outward normal
        (exit convention), otherwise from the inward normal (entry
        convention); both use the positively oriented tangent.
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            lc = math.cosh(a) * lth
            th = x[1] % lth
            if x[0] > 0:
                s = th * math.cosh(a)
            else:
                s = lc + ((-th) % lth) * math.cosh(a)
        else:
            R = self.params[0]
            u = math.atan2(x[1], x[0]) % (2.0 * math.pi)
            if self.code in (FLAT, CONFORMAL):
                s = R * u
            else:
                utab, stab = self._arclength_table()
                s = float(np.interp(u, utab, stab))
        _, tang, nu_in = self.boundary_point(s)
        ct = self.inner(x, v, (-nu_in) if not inward else nu_in)
        st = self.inner(x, v, tang)
        return s % self.boundary_length, math.atan2(st, ct)

    def boundary_coords_batch(self, X, V, inward=False):
        """Vectorized boundary coordinates (s, theta) of boundary phase points."""
        X = np.asarray(X, dtype=float)
        V = np.asarray(V, dtype=float)
        n = X.shape[0]
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            lc = math.cosh(a) * lth
            th = X[:, 1] % lth
            plus = X[:, 0] > 0
            s = np.where(plus, th * math.cosh(a), lc + ((-th) % lth) * math.cosh(a))
            # tangent (0, +-1/cosh a), outward normal (+-1, 0), g = diag(1, cosh^2)
            sgn = np.where(plus, 1.0, -1.0)
            ct = sgn * V[:, 0]
            st = sgn * math.cosh(a) * V[:, 1]
        elif self.code in (FLAT, CONFORMAL):
            R = self.params[0]
            u = np.arctan2(X[:, 1], X[:, 0]) % (2.0 * math.pi)
            s = R * u
            tx, ty = -np.sin(u), np.cos(u)
            nx, ny = np.cos(u), np.sin(u)
            # conformal factor is 1 on the boundary circle
            ct = V[:, 0] * nx + V[:, 1] * ny
            st = V[:, 0] * tx + V[:, 1] * ty
        else:
            out = np.array([self.boundary_coords_of(X[i], V[i], inward)
                            for i in range(n)])
            return out[:, 0], out[:, 1]
        if inward:
            ct = -ct
        return s % self.boundary_length, np.arctan2(st, ct)

    # ---- quadrature and audits ----------------------------------------------

    def interior_quadrature(self, n1, n2, extended=False):
        """Chart-fitted tensor quadrature nodes and geometric weights.

        Disk charts use a polar midpoint grid (no staircase error); the
        cylinder uses its rectangular chart directly.  Weights exclude the
        Riemannian density sqrt(det g).
        """
        scale = self.hull_factor if extended else 1.0
        if self.code == CYLINDER:
            a, lth = self.params[0] * scale, self.params[1]
            r = (np.arange(n1) + 0.5) / n1 * 2 * a - a
            th = (np.arange(n2) + 0.5) / n2 * lth
            rr, tt = np.meshgrid(r, th, indexing="ij")
            pts = np.stack([rr.ravel(), tt.ravel()], axis=1)
            w = np.full(pts.shape[0], (2 * a / n1) * (lth / n2))
            return pts, w
        R = self.params[0] * scale
        r = (np.arange(n1) + 0.5) / n1 * R
        ph = (np.arange(n2) + 0.5) / n2 * 2 * math.pi
        rr, pp = np.meshgrid(r, ph, indexing="ij")
        pts = np.stack([(rr * np.cos(pp)).ravel(), (rr * np.sin(pp)).ravel()],
                       axis=1)
        w = (rr * (R / n1) * (2 * math.pi / n2)).ravel()
        return pts, w

    def riemannian_area(self, n1=256, n2=256):
        pts, w = self.interior_quadrature(n1, n2)
        dets = np.array([self.sqrt_det_at(p) for p in pts])
        return float(np.sum(w * dets))

    def liouville_volume(self, n1=256, n2=256):
        return 2.0 * math.pi * self.riemannian_area(n1, n2)

    def diameter_hint(self):
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            return 2.0 * a + 0.5 * lth
        return 2.0 * self.params[0]

    def boundary_tangential_metric(self, n=16):
        """Samples of |tangent|_g at equal chart angles, for identification checks."""
        if self.code == CYLINDER:
            a, lth = self.params[0], self.params[1]
            return np.full(n, math.cosh(a))
        R = self.params[0]
        u = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        vals = np.empty(n)
        for i, ui in enumerate(u):
            x = np.array([R * math.cos(ui), R * math.sin(ui)])
            t = np.array([-math.sin(ui), math.cos(ui)])
            g, _, _ = self.metric_at(x, extended=True)
            vals[i] = math.sqrt(t @ g @ t) * R
        return vals


@dataclass(frozen=True)
class PhasePoint:
    """Point of the unit tangent bundle: chart position and unit velocity."""

    x: np.ndarray
    v: np.ndarray
    geometry_id: str = ""

    def reversed(self):
        return PhasePoint(x=self.x, v=-self.v, geometry_id=self.geometry_id)


def make_phase_point(geom, x, v):
    """Validated unit phase point; raises if |v|_g deviates from 1."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = geom.norm(x, v)
    if abs(nv - 1.0) > 1e-12:
        raise ValueError(f"|v|_g = {nv} is not unit")
    return PhasePoint(x=x, v=v, geometry_id=geom.geometry_id())


@dataclass(frozen=True)
class BoundaryFrame:
    s: float
    point: np.ndarray
    tangent: np.ndarray
    nu_in: np.ndarray
    II: float


@dataclass
class ConvexityReport:
    min_II: float
    curvature_min: float
    curvature_max: float
    spd_margin: float
    n_samples: int

    @property
    def passed(self):
        return self.min_II > 0.0 and self.spd_margin > 0.0

    def as_dict(self):
        return {"min_II": self.min_II, "curvature_min": self.curvature_min,
                "curvature_max": self.curvature_max,
                "spd_margin": self.spd_margin, "n_samples": self.n_samples,
                "passed": self.passed}


def convexity_audit(geom, n_samples=100):
    """Boundary convexity, curvature range, and SPD margin report."""
    ss = np.linspace(0.0, geom.boundary_length, n_samples, endpoint=False)
    min_II = min(geom.boundary_frame(s).II for s in ss)
    pts, _ = geom.interior_quadrature(max(2, int(math.sqrt(n_samples))),
                                      max(2, int(math.sqrt(n_samples))))
    kmin, kmax = np.inf, -np.inf
    spd = np.inf
    for p in pts:
        g11, g12, g22 = K._metric(geom.code, geom.params, geom.grid_data,
                                  geom.bumps, p[0], p[1])
        det = g11 * g22 - g12 * g12
        tr = g11 + g22
        lam = 0.5 * (tr - math.sqrt(max(tr * tr - 4.0 * det, 0.0)))
        spd = min(spd, lam)
        if lam > 0:
            kv = geom.gauss_curvature_at(p)
            kmin = min(kmin, kv)
            kmax = max(kmax, kv)
    return ConvexityReport(min_II=float(min_II), curvature_min=float(kmin),
                           curvature_max=float(kmax), spd_margin=float(spd),
                           n_samples=n_samples)


# ---- constructors ------------------------------------------------------------


def flat_disk(radius=1.0, extension_margin=0.25):
    return Geometry(FLAT, np.array([float(radius)]),
                    extension_margin=extension_margin)


def conformal_disk(radius=1.0, coefficients=(0.1,), extension_margin=0.25):
    coefficients = tuple(float(c) for c in coefficients)
    par = np.array([float(radius), float(len(coefficients)), *coefficients])
    return Geometry(CONFORMAL, par, extension_margin=extension_margin)


def hyperbolic_cylinder(half_width=1.0, circumference=2.0 * math.pi,
                        extension_margin=0.25):
    par = np.array([float(half_width), float(circumference)])
    return Geometry(CYLINDER, par, extension_margin=extension_margin)


def grid_metric(xs, ys, g11, g12, g22, domain_radius, periodic_y=False,
                extension_margin=0.0):
    """Grid metric on a disk chart from tabulated nodes on a uniform rectangle."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    if not (np.allclose(np.diff(xs), hx) and np.allclose(np.diff(ys), hy)):
        raise ConfigParse("grid metric requires uniform node spacing")
    data = np.stack([np.asarray(g11, dtype=float), np.asarray(g12, dtype=float),
                     np.asarray(g22, dtype=float)], axis=2)
    if data.shape[:2] != (xs.size, ys.size):
        raise ConfigParse("grid metric component shape mismatch")
    data = spline_coefficients(data, periodic_y)
    par = np.array([float(domain_radius), xs[0], ys[0], hx, hy,
                    float(xs.size), float(ys.size), 1.0 if periodic_y else 0.0])
    need = 3.0  # interpolation stencil + FD step margin, in cells
    if (xs[0] > -domain_radius - need * hx or xs[-1] < domain_radius + need * hx
            or ys[0] > -domain_radius - need * hy or ys[-1] < domain_radius + need * hy):
        raise ConfigParse("grid data must cover the chart plus a 3-cell margin")
    return Geometry(GRID, par, np.ascontiguousarray(data),
                    extension_margin=extension_margin)


def grid_metric_from_csv(path, domain_radius, extension_margin=0.0):
    """Load a grid metric from CSV rows (x, y, g11, g12, g22) with a header."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    xs = np.unique(body[:, 0])
    ys = np.unique(body[:, 1])
    if xs.size * ys.size != body.shape[0]:
        raise ConfigParse(f"CSV rows do not form a full {xs.size}x{ys.size} grid")
    order = np.lexsort((body[:, 1], body[:, 0]))
    body = body[order]
    comp = body[:, 2:5].reshape(xs.size, ys.size, 3)
    return grid_metric(xs, ys, comp[:, :, 0], comp[:, :, 1], comp[:, :, 2],
                       domain_radius, extension_margin=extension_margin)


def geometry_from_config(cfg):
    """Build a Geometry from the parsed ``geometry`` config section."""
    try:
        family = cfg["family"]
        margin = float(cfg.get("extension_margin", 0.25))
        if family == "flat_disk":
            return flat_disk(cfg.get("radius", 1.0), margin)
        if family == "conformal_disk":
            return conformal_disk(cfg.get("radius", 1.0),
                                  cfg.get("coefficients", [0.1]), margin)
        if family == "hyperbolic_cylinder":
            return hyperbolic_cylinder(cfg.get("half_width", 1.0),
                                       cfg.get("circumference", 2 * math.pi),
                                       margin)
        if family == "grid_metric":
            return grid_metric_from_csv(cfg["csv"], float(cfg["radius"]),
                                        margin)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigParse(f"bad geometry section: {exc}") from exc
    raise ConfigParse(f"unknown geometry family {family!r}")


# ---- bump perturbation helpers -----------------------------------------------


def compact_bump(amp, center, width, order=3, components=(1.0, 0.0, 0.0)):
    """Row for a compactly supported radial tensor bump."""
    e11, e12, e22 = components
    return [0, amp, center[0], center[1], width, order, e11, e12, e22, 0]


def boundary_flat_bump(amp, wavevec=(0.0, 0.0), phase=0.0, order=2,
                       components=(1.0, 0.0, 0.0), conformal=False):
    """Row for a global bump vanishing to ``order`` at the chart boundary."""
    e11, e12, e22 = components
    return [1, amp, wavevec[0], wavevec[1], phase, order, e11, e12, e22,
            1 if conformal else 0]


def potential_bump(amp, center, width, order=3, covector=(1.0, 0.0)):
    """Row for a potential perturbation: the symmetric derivative of the
    compactly supported 1-form B * covector in the base metric."""
    e1, e2 = covector
    return [2, amp, center[0], center[1], width, order, e1, e2, 0.0, 0]
