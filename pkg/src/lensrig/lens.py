"""Lens data computation and the identities that constrain it.

Covers the per-ray lens records and dataset comparisons, the L2 isometry of
the scattering operator, the first variation of the length map against the
X-ray transform of the metric perturbation, and the quadratic-remainder
scaling of the boundary-distance expansion.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from . import tensors as tn
from .errors import (BoundaryMetricMismatch, GridMismatch, NonuniqueGeodesic,
                     TrappedUnderPerturbation)
from .flow import entry_phase_arrays, trace_entries
from .geometry import CYLINDER
from .xray import BoundaryGrid, boundary_grid, mu_norm, xray_m


@dataclass
class LensDataset:
    """Gridded lens data: length and exit coordinates per entry node."""

    grid: BoundaryGrid
    geometry_id: str
    ell: np.ndarray
    exit_s: np.ndarray
    exit_theta: np.ndarray
    trapped: np.ndarray

    @property
    def untrapped_fraction(self):
        return float(1.0 - self.trapped.mean())

    def to_csv(self, path):
        g = self.grid
        with open(path, "w", newline="") as fh:
            fh.write("s,theta,ell,s_out,theta_out,trapped\n")
            for i in range(g.n_s):
                for j in range(g.n_theta):
                    fh.write("%.17g,%.17g,%.17g,%.17g,%.17g,%d\n"
                             % (g.s[i], g.theta[j], self.ell[i, j],
                                self.exit_s[i, j], self.exit_theta[i, j],
                                int(self.trapped[i, j])))


def lens_dataset(geom, grid):
    """Assemble the lens dataset from an already traced boundary grid."""
    recs = grid.records.reshape(-1, K.REC_LEN)
    ok = recs[:, K.REC_STATUS] == K.ST_EXIT
    s_out = np.full(recs.shape[0], np.nan)
    th_out = np.full(recs.shape[0], np.nan)
    if ok.any():
        se, te = geom.boundary_coords_batch(recs[ok][:, K.REC_X:K.REC_Y + 1],
                                            recs[ok][:, K.REC_VX:K.REC_VY + 1])
        s_out[ok] = se
        th_out[ok] = te
    shape = (grid.n_s, grid.n_theta)
    ell = np.where(ok, recs[:, K.REC_ELL], np.nan).reshape(shape)
    return LensDataset(grid=grid, geometry_id=geom.geometry_id(),
                       ell=ell, exit_s=s_out.reshape(shape),
                       exit_theta=th_out.reshape(shape),
                       trapped=grid.trapped.copy())


def _circ_dist(a, b, period):
    d = np.abs(a - b) % period
    return np.minimum(d, period - d)


@dataclass
class LensComparison:
    sup_dell: float
    l2_mu_dell: float
    sup_exit_mismatch: float
    masked_nodes: int

    def as_dict(self):
        return {"sup_dell": self.sup_dell, "l2_mu_dell": self.l2_mu_dell,
                "sup_exit_mismatch": self.sup_exit_mismatch,
                "masked_nodes": self.masked_nodes}


def lens_compare(L1, L2, geom1=None, geom2=None):
    """Pointwise and L2(mu) differences of two lens datasets on one grid."""
    g1, g2 = L1.grid, L2.grid
    if (g1.n_s, g1.n_theta) != (g2.n_s, g2.n_theta):
        raise GridMismatch(f"grids {g1.n_s}x{g1.n_theta} vs {g2.n_s}x{g2.n_theta}")
    if not (np.allclose(g1.s, g2.s, atol=1e-10)
            and np.allclose(g1.theta, g2.theta, atol=1e-10)):
        raise BoundaryMetricMismatch("boundary parametrizations differ")
    if geom1 is not None and geom2 is not None:
        t1 = geom1.boundary_tangential_metric()
        t2 = geom2.boundary_tangential_metric()
        if not np.allclose(t1, t2, atol=1e-9):
            raise BoundaryMetricMismatch("geometries disagree on the boundary "
                                         "tangent metric")
    both = ~(L1.trapped | L2.trapped)
    masked = int(L1.trapped.sum() + L2.trapped.sum()
                 - (L1.trapped & L2.trapped).sum())
    dell = np.where(both, L1.ell - L2.ell, 0.0)
    # midpoint grid: first and last nodes sit half a cell from the seam
    period = g1.s[-1] + g1.s[0]
    ds = np.where(both, _circ_dist(L1.exit_s, L2.exit_s, period), 0.0)
    dth = np.where(both, np.abs(L1.exit_theta - L2.exit_theta), 0.0)
    l2 = math.sqrt(float(np.sum(g1.w[both] * dell[both] ** 2)))
    return LensComparison(sup_dell=float(np.max(np.abs(dell))),
                          l2_mu_dell=l2,
                          sup_exit_mismatch=float(max(ds.max(), dth.max())),
                          masked_nodes=masked)


@dataclass
class IsometryReport:
    norm_outflow: float
    norm_inflow_pullback: float
    rel_err: float


def scattering_isometry_check(geom, f, dataset):
    """L2(mu) isometry of the scattering pullback for a closed-form function.

    ``f(s, theta)`` is evaluated at outflow coordinates.  The pullback norm
    sums f(S(y)) over the inflow grid; the direct norm integrates f over the
    outflow boundary with the same flux weights (the outflow (s, theta)
    midpoint grid carries the identical cos-weighted quadrature).
    """
    g = dataset.grid
    m = ~dataset.trapped
    pull = np.zeros_like(dataset.ell)
    pull[m] = f(dataset.exit_s[m], dataset.exit_theta[m])
    n_pull = math.sqrt(float(np.sum(g.w[m] * pull[m] ** 2)))
    S, T = np.meshgrid(g.s, g.theta, indexing="ij")
    direct = f(S, T)
    n_direct = math.sqrt(float(np.sum(g.w * direct ** 2)))
    return IsometryReport(norm_outflow=n_direct, norm_inflow_pullback=n_pull,
                          rel_err=abs(n_pull - n_direct) / max(n_direct, 1e-300))


def bump_tensor_field(geom, rows, grid):
    """Sample the closed-form bump perturbation as a rank-2 grid field."""
    pert = geom.with_bumps(rows)
    base = K._metric_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                           grid.X.ravel(), grid.Y.ravel())
    full = K._metric_batch(pert.code, pert.params, pert.grid_data, pert.bumps,
                           grid.X.ravel(), grid.Y.ravel())
    data = (full - base).reshape(grid.nx, grid.ny, 3)
    return tn.SymTensorField(grid, 2, data)


@dataclass
class VariationalCheck:
    lhs: float
    rhs: float
    abs_err: float
    ell: float
    xray_term: float
    alpha_term: float


def variational_check(geom, h_rows, s, theta, t_step=1e-4, t_cap=200.0,
                      tol=1e-11, h_field=None, grid_n=192):
    """First variation of the length map against 0.5*I_2 h plus the
    contact-form pairing with the exit-point velocity.

    The derivative of the length and of the exit base point over the family
    g_t = g + t*h is taken by central differences at step ``t_step``; the
    contact form is evaluated at the unperturbed exit.
    """
    # fixed entry phase point; velocities rescaled into each unit bundle
    pt0, _ = geom.phase_from_boundary(s, theta)
    datum0 = _single_datum(geom, pt0.x, pt0.v, t_cap, tol)
    if datum0 is None:
        raise TrappedUnderPerturbation("base ray trapped or lost")
    scaled_p = _scale_rows(h_rows, t_step)
    scaled_m = _scale_rows(h_rows, -t_step)
    gp = geom.with_bumps(scaled_p)
    gm = geom.with_bumps(scaled_m)
    dp = _single_datum(gp, pt0.x, pt0.v / gp.norm(pt0.x, pt0.v), t_cap, tol)
    dm = _single_datum(gm, pt0.x, pt0.v / gm.norm(pt0.x, pt0.v), t_cap, tol)
    if dp is None or dm is None:
        raise TrappedUnderPerturbation(
            f"node (s={s}, theta={theta}) trapped under perturbation")
    lhs = (dp["ell"] - dm["ell"]) / (2.0 * t_step)
    if h_field is None:
        igrid = tn.InteriorGrid(geom, grid_n)
        h_field = bump_tensor_field(geom, h_rows, igrid)
    ray = trace_entries(geom, np.array([s]), np.array([theta]), t_cap=t_cap,
                        tol=tol, payload=h_field.payload())[0]
    i2h = float(ray[K.REC_PAYLOAD])
    dxdt = (dp["x"] - dm["x"]) / (2.0 * t_step)
    g_exit, _, _ = geom.metric_at(datum0["x"], extended=True)
    alpha_term = float(dxdt @ g_exit @ datum0["v"])
    rhs = 0.5 * i2h + alpha_term
    return VariationalCheck(lhs=lhs, rhs=rhs, abs_err=abs(lhs - rhs),
                            ell=datum0["ell"], xray_term=0.5 * i2h,
                            alpha_term=alpha_term)


def _scale_rows(rows, factor):
    out = [list(r) for r in np.atleast_2d(np.asarray(rows, dtype=float))]
    for r in out:
        r[1] *= factor
    return out


def _single_datum(geom, x, v, t_cap, tol):
    from .flow import _trace_one
    rec = _trace_one(geom, x, v, t_cap, tol)
    if int(rec[K.REC_STATUS]) != K.ST_EXIT:
        return None
    return {"ell": float(rec[K.REC_ELL]),
            "x": rec[K.REC_X:K.REC_Y + 1].copy(),
            "v": rec[K.REC_VX:K.REC_VY + 1].copy()}


def geodesic_between(geom, s_a, s_b, t_cap=200.0, tol=1e-11, scan_half=0.6,
                     max_dist_frac=0.3):
    """Boundary two-point connection by shooting on the entry angle.

    Returns (theta, length).  Raises NonuniqueGeodesic when the pair is not
    near-boundary or when several shooting angles connect the points.
    """
    L = geom.boundary_length
    A, tangA, nuA = geom.boundary_point(s_a)
    B, _, _ = geom.boundary_point(s_b)
    chord = B - A
    chord_len = geom.norm(A, chord)
    if chord_len > max_dist_frac * geom.diameter_hint():
        raise NonuniqueGeodesic(
            f"pair separation {chord_len:.3f} exceeds the near-boundary limit")
    th0 = math.atan2(float(chord @ tangA), float(chord @ nuA))

    def miss(th):
        rec = trace_entries(geom, np.array([s_a]), np.array([th]),
                            t_cap=t_cap, tol=tol)[0]
        if int(rec[K.REC_STATUS]) != K.ST_EXIT:
            return None, None
        se, _ = geom.boundary_coords_batch(rec[None, K.REC_X:K.REC_Y + 1],
                                           rec[None, K.REC_VX:K.REC_VY + 1])
        d = (se[0] - s_b + 0.5 * L) % L - 0.5 * L
        return d, float(rec[K.REC_ELL])

    # coarse scan around the chord angle for root brackets
    ths = np.linspace(th0 - scan_half, th0 + scan_half, 25)
    ths = ths[np.abs(ths) < math.pi / 2 - 1e-6]
    vals = []
    for th in ths:
        d, _ = miss(th)
        vals.append(d)
    brackets = []
    for i in range(len(ths) - 1):
        if vals[i] is None or vals[i + 1] is None:
            continue
        if vals[i] == 0.0 or vals[i] * vals[i + 1] < 0:
            brackets.append((ths[i], ths[i + 1], vals[i], vals[i + 1]))
    if len(brackets) == 0:
        raise NonuniqueGeodesic("no connecting geodesic in the scan window")
    if len(brackets) > 1:
        raise NonuniqueGeodesic(f"{len(brackets)} connecting geodesics found")
    lo, hi, flo, fhi = brackets[0]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        fm, ell = miss(mid)
        if fm is None:
            raise NonuniqueGeodesic("shooting ray lost inside the bracket")
        if abs(fm) < 1e-12 * L or hi - lo < 1e-14:
            return mid, ell
        if flo * fm <= 0:
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi), ell


@dataclass
class DistanceResidualReport:
    pairs: list
    ratios: list
    in_band: int

    def fraction_in_band(self, lo=0.15, hi=0.35):
        if not self.ratios:
            return 0.0
        r = np.asarray(self.ratios)
        return float(np.mean((r >= lo) & (r <= hi)))


def _i2_bump_exact(geom, h_rows, s_a, theta, ell, dt=0.002):
    """X-ray transform of a closed-form bump along one traced ray (Simpson)."""
    from .flow import resample_ray
    pt, _ = geom.phase_from_boundary(s_a, theta)
    npan = max(4, int(math.ceil(ell / (2.0 * dt))))
    xs, ys, vxs, vys, w = resample_ray(geom, pt.x, pt.v, ell, npan)
    pert = geom.with_bumps(h_rows)
    base = K._metric_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                           xs, ys)
    full = K._metric_batch(pert.code, pert.params, pert.grid_data, pert.bumps,
                           xs, ys)
    h = full - base
    integrand = (h[:, 0] * vxs * vxs + 2.0 * h[:, 1] * vxs * vys
                 + h[:, 2] * vys * vys)
    return float(np.sum(w * integrand))


def boundary_distance_residual(geom, h_rows, pairs, tol=1e-11, t_cap=200.0):
    """Quadratic scaling of the boundary-distance expansion remainder.

    For each boundary pair, computes R(h) = d_{g+h} - d_g - 0.5 I_2 h along
    the unperturbed connecting geodesic, and the ratio R(h/2) / R(h) which
    the second-order remainder bound forces towards 1/4.
    """
    h_half = _scale_rows(h_rows, 0.5)
    geom_h = geom.with_bumps(h_rows)
    geom_h2 = geom.with_bumps(h_half)
    rows = []
    ratios = []
    for (s_a, s_b) in pairs:
        th0, d0 = geodesic_between(geom, s_a, s_b, t_cap=t_cap, tol=tol)
        _, dh = geodesic_between(geom_h, s_a, s_b, t_cap=t_cap, tol=tol)
        _, dh2 = geodesic_between(geom_h2, s_a, s_b, t_cap=t_cap, tol=tol)
        i2h = _i2_bump_exact(geom, h_rows, s_a, th0, d0)
        r_h = dh - d0 - 0.5 * i2h
        r_h2 = dh2 - d0 - 0.25 * i2h
        ratio = r_h2 / r_h if r_h != 0 else math.nan
        rows.append({"s_a": s_a, "s_b": s_b, "d0": d0, "R_h": r_h,
                     "R_h2": r_h2, "ratio": ratio})
        ratios.append(ratio)
    rep = DistanceResidualReport(pairs=rows, ratios=ratios, in_band=0)
    rep.in_band = int(round(rep.fraction_in_band() * len(ratios)))
    return rep
