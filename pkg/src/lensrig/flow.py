"""Geodesic flow integration, exit detection, and variational transport.

The integrator is an adaptive embedded Runge-Kutta 5(4) (Dormand-Prince)
with per-step renormalization of the velocity to unit g-norm.  Boundary
exit brackets the first sign change of the boundary defining function and
polishes the crossing with Newton steps that re-integrate the flow over the
remaining sub-step.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import NearGlancing, OutOfChart, StepFailure
from .geometry import CONFORMAL, CYLINDER, FLAT, Geometry, PhasePoint

TOL_MIN = 1e-13
TOL_MAX = 1e-6


def _check_tol(tol):
    if not (TOL_MIN <= tol <= TOL_MAX):
        raise ValueError(f"tolerance {tol} outside [{TOL_MIN}, {TOL_MAX}]")


@dataclass
class Trajectory:
    """Accepted integrator samples along one geodesic."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    status: int
    max_drift_rate: float
    n_renorm: int
    max_correction: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("t,x,y,vx,vy\n")
            for i in range(self.t.size):
                fh.write("%.17g,%.17g,%.17g,%.17g,%.17g\n"
                         % (self.t[i], self.x[i, 0], self.x[i, 1],
                            self.v[i, 0], self.v[i, 1]))


TRAPPED = float("inf")


@dataclass
class LensDatum:
    """Per-ray lens record: entry, length, exit (absent when trapped)."""

    entry_s: float
    entry_theta: float
    ell: float
    trapped: bool
    t_cap: float
    exit_s: Optional[float] = None
    exit_theta: Optional[float] = None
    exit_x: Optional[np.ndarray] = None
    exit_v: Optional[np.ndarray] = None
    clairaut: Optional[float] = None
    payload: float = 0.0
    max_drift_rate: float = 0.0


def integrate_geodesic(geom, y, t_end, tol=1e-10):
    """Trace the geodesic through phase point y for time t_end."""
    _check_tol(tol)
    cap = 4096
    while True:
        ts = np.empty(cap)
        xs = np.empty(cap)
        ys = np.empty(cap)
        vxs = np.empty(cap)
        vys = np.empty(cap)
        cnt, status, drift, nren, corr = K._trace_record(
            geom.code, geom.params, geom.grid_data, geom.bumps,
            y.x[0], y.x[1], y.v[0], y.v[1], t_end, tol, geom.hull_factor,
            ts, xs, ys, vxs, vys)
        if cnt < cap or ts[cnt - 1] >= t_end:
            break
        if cap >= 2 ** 23:
            raise StepFailure("trajectory sample budget exhausted")
        cap *= 4
    if status == K.ST_STEP_FAILURE:
        raise StepFailure("minimum step size underflowed")
    if status == K.ST_OUT_OF_CHART:
        raise OutOfChart("trajectory left the extended chart without exit")
    return Trajectory(t=ts[:cnt].copy(),
                      x=np.stack([xs[:cnt], ys[:cnt]], axis=1),
                      v=np.stack([vxs[:cnt], vys[:cnt]], axis=1),
                      status=int(status), max_drift_rate=float(drift),
                      n_renorm=int(nren), max_correction=float(corr))


def _trace_one(geom, x, v, t_cap, tol, payload=None):
    prank, pgrid, pmeta = payload if payload is not None else \
        (-1, K._EMPTY_GRID, K._EMPTY_META)
    rec = K._trace_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                         np.array([x[0]]), np.array([x[1]]),
                         np.array([v[0]]), np.array([v[1]]),
                         t_cap, tol, geom.hull_factor, prank, pgrid, pmeta)[0]
    return rec


def exit_record(geom, y, t_cap=200.0, tol=1e-10, payload=None):
    """Lens datum of the ray through inward boundary phase point y."""
    _check_tol(tol)
    s_in, th_in = geom.boundary_coords_of(y.x, y.v, inward=True)
    rec = _trace_one(geom, y.x, y.v, t_cap, tol, payload)
    return _record_to_datum(geom, s_in, th_in, rec, t_cap)


def _record_to_datum(geom, s_in, th_in, rec, t_cap):
    status = int(rec[K.REC_STATUS])
    if status == K.ST_STEP_FAILURE:
        raise StepFailure("minimum step size underflowed")
    if status == K.ST_OUT_OF_CHART:
        raise OutOfChart("ray left the extended chart without crossing the boundary")
    clair = None
    if geom.code == CYLINDER:
        clair = clairaut(geom, np.array([rec[K.REC_X], rec[K.REC_Y]]),
                         np.array([rec[K.REC_VX], rec[K.REC_VY]]))
    if status == K.ST_TRAPPED:
        return LensDatum(entry_s=s_in, entry_theta=th_in, ell=float(rec[K.REC_ELL]),
                         trapped=True, t_cap=t_cap, clairaut=clair,
                         payload=float(rec[K.REC_PAYLOAD]),
                         max_drift_rate=float(rec[K.REC_DRIFT]))
    ex = np.array([rec[K.REC_X], rec[K.REC_Y]])
    ev = np.array([rec[K.REC_VX], rec[K.REC_VY]])
    s_out, th_out = geom.boundary_coords_of(ex, ev, inward=False)
    return LensDatum(entry_s=s_in, entry_theta=th_in, ell=float(rec[K.REC_ELL]),
                     trapped=False, t_cap=t_cap, exit_s=s_out,
                     exit_theta=th_out, exit_x=ex, exit_v=ev, clairaut=clair,
                     payload=float(rec[K.REC_PAYLOAD]),
                     max_drift_rate=float(rec[K.REC_DRIFT]))


def entry_phase_arrays(geom, ss, ths):
    """Vectorized inward phase points for boundary coordinates (s, theta)."""
    ss = np.asarray(ss, dtype=float)
    ths = np.asarray(ths, dtype=float)
    n = ss.size
    xs = np.empty(n)
    ys = np.empty(n)
    vxs = np.empty(n)
    vys = np.empty(n)
    if geom.code in (FLAT, CONFORMAL):
        R = geom.params[0]
        u = ss / R
        cu, su = np.cos(u), np.sin(u)
        xs, ys = R * cu, R * su
        tx, ty = -su, cu
        nx, ny = -cu, -su
        vxs = np.cos(ths) * nx + np.sin(ths) * tx
        vys = np.cos(ths) * ny + np.sin(ths) * ty
    elif geom.code == CYLINDER:
        a, lth = geom.params[0], geom.params[1]
        lc = math.cosh(a) * lth
        plus = ss < lc
        th_plus = ss / math.cosh(a)
        th_minus = -(ss - lc) / math.cosh(a)
        xs = np.where(plus, a, -a)
        ys = np.where(plus, th_plus, th_minus % lth)
        tx = np.zeros(n)
        ty = np.where(plus, 1.0, -1.0) / math.cosh(a)
        nx = np.where(plus, -1.0, 1.0)
        vxs = np.cos(ths) * nx
        vys = np.sin(ths) * ty
    else:
        for i in range(n):
            pt, w = geom.phase_from_boundary(ss[i], ths[i])
            xs[i], ys[i] = pt.x
            vxs[i], vys[i] = pt.v
    return xs, ys, vxs, vys


def trace_entries(geom, ss, ths, t_cap=200.0, tol=1e-10, payload=None):
    """Batch exit records over boundary coordinates; returns the raw record matrix."""
    _check_tol(tol)
    xs, ys, vxs, vys = entry_phase_arrays(geom, ss, ths)
    prank, pgrid, pmeta = payload if payload is not None else \
        (-1, K._EMPTY_GRID, K._EMPTY_META)
    return K._trace_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                          xs, ys, vxs, vys, t_cap, tol, geom.hull_factor,
                          prank, pgrid, pmeta)


def flow_jacobian(geom, y, t, tol=1e-10):
    """Differential of the geodesic flow at time t, as a 4x4 matrix."""
    _check_tol(tol)
    return K._flow_jacobian(geom.code, geom.params, geom.grid_data, geom.bumps,
                            y.x[0], y.x[1], y.v[0], y.v[1], t, tol)


def _entry_jacobian(geom, s, theta, ds=1e-6, dth=1e-6):
    """4x2 derivative of the entry phase point with respect to (s, theta)."""
    cols = []
    for dp, dq in ((ds, 0.0), (0.0, dth)):
        pp, _ = geom.phase_from_boundary(s + dp, theta + dq)
        pm, _ = geom.phase_from_boundary(s - dp, theta - dq)
        d = np.concatenate([(pp.x - pm.x), (pp.v - pm.v)]) / (2.0 * (dp + dq))
        cols.append(d)
    return np.stack(cols, axis=1)


def length_gradient(geom, s, theta, t_cap=200.0, tol=1e-11):
    """Gradient of the length map over (s, theta) via the implicit formula."""
    pt, _ = geom.phase_from_boundary(s, theta)
    rec = _trace_one(geom, pt.x, pt.v, t_cap, tol)
    if int(rec[K.REC_STATUS]) != K.ST_EXIT:
        raise OutOfChart("ray did not exit before the cap")
    ell = rec[K.REC_ELL]
    ex = np.array([rec[K.REC_X], rec[K.REC_Y]])
    ev = np.array([rec[K.REC_VX], rec[K.REC_VY]])
    s_out, th_out = geom.boundary_coords_of(ex, ev, inward=False)
    if abs(math.cos(th_out)) < 1e-3:
        raise NearGlancing(f"exit angle {th_out} too close to tangential")
    J = flow_jacobian(geom, pt, ell, tol)
    dY = _entry_jacobian(geom, s, theta)
    # d rho at the exit point (depends on position only)
    eps = 1e-7
    drho = np.array([
        (geom.rho(ex + [eps, 0.0]) - geom.rho(ex - [eps, 0.0])) / (2 * eps),
        (geom.rho(ex + [0.0, eps]) - geom.rho(ex - [0.0, eps])) / (2 * eps)])
    xrho_dot = drho @ ev
    dpos = (J @ dY)[:2, :]
    return -(drho @ dpos) / xrho_dot


def conjugate_scan(geom, y, t_max, tol=1e-10):
    """First conjugate time along the geodesic, or None up to t_max/exit."""
    _check_tol(tol)
    t_conj, _ = K._jacobi_scan(geom.code, geom.params, geom.grid_data,
                               geom.bumps, y.x[0], y.x[1], y.v[0], y.v[1],
                               t_max, tol, geom.hull_factor)
    return None if t_conj < 0 else float(t_conj)


@dataclass
class ReversalCheck:
    residual: float
    ell_forward: float
    ell_reversed: float


def time_reversal_check(geom, y, t_cap=200.0, tol=1e-11):
    """Residual of S(iota S(y)) = iota(y) for a non-trapped boundary ray."""
    fwd = exit_record(geom, y, t_cap, tol)
    if fwd.trapped:
        raise ValueError("time reversal check needs a non-trapped ray")
    back = PhasePoint(x=fwd.exit_x, v=-fwd.exit_v)
    rev = exit_record(geom, back, t_cap, tol)
    if rev.trapped:
        raise ValueError("reversed ray unexpectedly trapped")
    res = max(float(np.max(np.abs(rev.exit_x - y.x))),
              float(np.max(np.abs(rev.exit_v + y.v))))
    return ReversalCheck(residual=res, ell_forward=fwd.ell, ell_reversed=rev.ell)


def clairaut(geom, x, v):
    """Conserved quantity cosh^2(r) * thetadot on the cylinder of revolution."""
    if geom.code != CYLINDER:
        raise ValueError("Clairaut invariant is defined for the cylinder family")
    return math.cosh(x[0]) ** 2 * v[1]


def resample_ray(geom, x, v, ell, n_panels):
    """Equispaced phase samples along a ray for composite Simpson quadrature."""
    nq = 2 * max(2, int(n_panels))
    xs = np.empty(nq + 1)
    ys = np.empty(nq + 1)
    vxs = np.empty(nq + 1)
    vys = np.empty(nq + 1)
    K._resample_ray(geom.code, geom.params, geom.grid_data, geom.bumps,
                    x[0], x[1], v[0], v[1], ell, nq, xs, ys, vxs, vys)
    w = np.empty(nq + 1)
    h = ell / nq
    w[0] = w[-1] = h / 3.0
    w[1:-1:2] = 4.0 * h / 3.0
    w[2:-1:2] = 2.0 * h / 3.0
    return xs, ys, vxs, vys, w
