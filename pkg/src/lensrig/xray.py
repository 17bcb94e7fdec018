"""X-ray transform of symmetric tensors, its adjoint, and the normal operator.

The forward transform integrates the fiberwise pullback of a gridded tensor
field along traced geodesics of a boundary grid.  The adjoint transports
boundary values back along the flow and integrates them against velocity
powers over the fiber, which realizes the measure-theoretic adjoint with
respect to the flux-weighted boundary measure.  Both directions precompute
their ray geometry once, so repeated applications (conjugate-gradient
inversion) reduce to interpolation sweeps.
"""

import math
from dataclasses import dataclass, field as dfield
from typing import Optional

import numpy as np

from . import _kernels as K
from . import tensors as tn
from .errors import DeltaTooLarge, NoConvergence
from .flow import _check_tol, entry_phase_arrays, trace_entries
from .geometry import CYLINDER

DEFAULT_THETA_MAX = math.pi / 2 - 1e-3


@dataclass
class BoundaryGrid:
    """Midpoint grid on the inflow boundary with flux quadrature weights.

    Weights integrate the cos(theta) density exactly over each theta cell,
    so the total weight equals 2 sin(theta_max) times the boundary length.
    """

    geometry_id: str
    s: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    trapped: np.ndarray
    ell: np.ndarray
    records: np.ndarray
    theta_max: float
    t_cap: float
    n_components: int

    @property
    def n_s(self):
        return self.s.size

    @property
    def n_theta(self):
        return self.theta.size

    def signature(self):
        return (self.geometry_id, self.n_s, self.n_theta, self.theta_max,
                self.t_cap)


def boundary_grid(geom, n_s, n_theta, theta_max=None, t_cap=200.0, tol=1e-10):
    """Trace a full boundary grid and collect weights and the trapped mask."""
    if n_s < 4 or n_theta < 4:
        raise ValueError("need at least 4 nodes per direction")
    if geom.code == CYLINDER and n_s % 2:
        raise ValueError("cylinder boundary grids need even n_s (two components)")
    if theta_max is None:
        theta_max = DEFAULT_THETA_MAX
    L = geom.boundary_length
    ds = L / n_s
    dth = 2.0 * theta_max / n_theta
    s = (np.arange(n_s) + 0.5) * ds
    th = -theta_max + (np.arange(n_theta) + 0.5) * dth
    # exact cell integrals of cos(theta)
    wth = np.sin(th + 0.5 * dth) - np.sin(th - 0.5 * dth)
    w = np.outer(np.full(n_s, ds), wth)
    S, T = np.meshgrid(s, th, indexing="ij")
    recs = trace_entries(geom, S.ravel(), T.ravel(), t_cap=t_cap, tol=tol)
    recs = recs.reshape(n_s, n_theta, K.REC_LEN)
    trapped = recs[:, :, K.REC_STATUS] != K.ST_EXIT
    ell = recs[:, :, K.REC_ELL].copy()
    return BoundaryGrid(geometry_id=geom.geometry_id(), s=s, theta=th, w=w,
                        trapped=trapped, ell=ell, records=recs,
                        theta_max=float(theta_max), t_cap=float(t_cap),
                        n_components=len(geom.boundary_components()))


@dataclass
class XRaySamples:
    """Values of I_m h on a boundary grid (NaN on trapped nodes)."""

    grid: BoundaryGrid
    values: np.ndarray
    rank: int
    geometry_id: str

    def finite_values(self):
        return np.where(self.grid.trapped, 0.0, self.values)

    def to_csv(self, path):
        g = self.grid
        with open(path, "w", newline="") as fh:
            fh.write("s,theta,weight,value,trapped\n")
            for i in range(g.n_s):
                for j in range(g.n_theta):
                    fh.write("%.17g,%.17g,%.17g,%.17g,%d\n"
                             % (g.s[i], g.theta[j], g.w[i, j],
                                self.values[i, j], int(g.trapped[i, j])))


def mu_inner(grid, a, b):
    """Flux-measure pairing of two boundary value tables (trapped excluded)."""
    m = ~grid.trapped
    return float(np.sum(grid.w[m] * a[m] * b[m]))


def mu_norm(grid, a):
    return math.sqrt(max(mu_inner(grid, a, a), 0.0))


def xray_m(geom, h, grid, tol=1e-10):
    """X-ray transform of a rank-m field over a traced boundary grid.

    Every untrapped node re-traces its ray with the pullback of h carried
    as an extra quadrature state of the adaptive integrator.
    """
    _check_tol(tol)
    S, T = np.meshgrid(grid.s, grid.theta, indexing="ij")
    recs = trace_entries(geom, S.ravel(), T.ravel(), t_cap=grid.t_cap,
                         tol=tol, payload=h.payload())
    vals = recs[:, K.REC_PAYLOAD].reshape(grid.n_s, grid.n_theta).copy()
    vals[grid.trapped] = np.nan
    return XRaySamples(grid=grid, values=vals, rank=h.rank,
                       geometry_id=geom.geometry_id())


# ----------------------------------------------------------------------
# precomputed ray tables for the normal operator
# ----------------------------------------------------------------------

@dataclass
class NormalTables:
    grid: BoundaryGrid
    igrid: tn.InteriorGrid
    n_fiber: int
    fwd_offsets: np.ndarray
    fwd_xs: np.ndarray
    fwd_ys: np.ndarray
    fwd_vxs: np.ndarray
    fwd_vys: np.ndarray
    fwd_wq: np.ndarray
    node_flat: np.ndarray
    back_ok: np.ndarray
    back_cf: np.ndarray
    back_rf: np.ndarray
    back_blk: np.ndarray
    back_vb1: np.ndarray
    back_vb2: np.ndarray
    cols_per_block: int


def build_normal_tables(geom, grid, igrid, n_fiber=64, dt=0.02, tol=1e-9,
                        fiber_offset=0.5, forward_only=False):
    """Trace and cache all ray geometry needed by I_m and its adjoint."""
    n_s, n_th = grid.n_s, grid.n_theta
    ells = np.where(grid.trapped, 0.0, grid.ell).ravel()
    npan = np.where(ells > 0, np.maximum(2, np.ceil(ells / (2 * dt))), 0)
    counts = np.where(ells > 0, 2 * npan.astype(np.int64) + 1, 0)
    offsets = np.zeros(ells.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    fx = np.zeros(total)
    fy = np.zeros(total)
    fvx = np.zeros(total)
    fvy = np.zeros(total)
    fwq = np.zeros(total)
    S, T = np.meshgrid(grid.s, grid.theta, indexing="ij")
    xs0, ys0, vx0, vy0 = entry_phase_arrays(geom, S.ravel(), T.ravel())
    K._resample_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                      xs0, ys0, vx0, vy0, ells, offsets, fx, fy, fvx, fvy, fwq)
    if forward_only:
        empty = np.zeros(0)
        return NormalTables(grid=grid, igrid=igrid, n_fiber=n_fiber,
                            fwd_offsets=offsets, fwd_xs=fx, fwd_ys=fy,
                            fwd_vxs=fvx, fwd_vys=fvy, fwd_wq=fwq,
                            node_flat=np.zeros(0, dtype=np.int64),
                            back_ok=empty.astype(bool), back_cf=empty,
                            back_rf=empty, back_blk=empty.astype(np.int64),
                            back_vb1=empty, back_vb2=empty,
                            cols_per_block=grid.n_s // grid.n_components)

    # backward table: entry coordinates of every (interior node, fiber angle)
    node_flat = np.flatnonzero(igrid.mask.ravel())
    nodes_xy = np.stack([igrid.X.ravel()[node_flat],
                         igrid.Y.ravel()[node_flat]], axis=1)
    nn = node_flat.size
    met = K._metric_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                          nodes_xy[:, 0].copy(), nodes_xy[:, 1].copy())
    det = met[:, 0] * met[:, 2] - met[:, 1] ** 2
    e1x = 1.0 / np.sqrt(met[:, 0])
    fac = np.sqrt(met[:, 0] / det)
    e2x = -met[:, 1] / met[:, 0] * fac
    e2y = fac
    phis = (np.arange(n_fiber) + fiber_offset) * 2.0 * math.pi / n_fiber
    X = np.repeat(nodes_xy[:, 0], n_fiber)
    Y = np.repeat(nodes_xy[:, 1], n_fiber)
    cph = np.tile(np.cos(phis), nn)
    sph = np.tile(np.sin(phis), nn)
    vx = cph * np.repeat(e1x, n_fiber) + sph * np.repeat(e2x, n_fiber)
    vy = sph * np.repeat(e2y, n_fiber)
    recs = K._trace_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                          X, Y, -vx, -vy, grid.t_cap, tol, geom.hull_factor,
                          -1, K._EMPTY_GRID, K._EMPTY_META)
    ok = recs[:, K.REC_STATUS] == K.ST_EXIT
    ex = recs[:, K.REC_X:K.REC_Y + 1]
    ev = recs[:, K.REC_VX:K.REC_VY + 1]
    s_e = np.zeros(nn * n_fiber)
    th_e = np.zeros(nn * n_fiber)
    if ok.any():
        se, te = geom.boundary_coords_batch(ex[ok], ev[ok], inward=False)
        s_e[ok] = se
        th_e[ok] = -te  # reversal maps the exit to the entry of the original ray
    # fractional grid coordinates (periodic per boundary component)
    nblocks = grid.n_components
    cols = n_s // nblocks
    comp_len = geom.boundary_length / nblocks
    blk = np.minimum((s_e // comp_len).astype(np.int64), nblocks - 1)
    s_local = s_e - blk * comp_len
    ds = comp_len / cols
    cf = s_local / ds - 0.5
    dth = 2.0 * grid.theta_max / n_th
    rf = (th_e + grid.theta_max) / dth - 0.5
    # the metric covector of v at each (node, angle)
    g11 = np.repeat(met[:, 0], n_fiber)
    g12 = np.repeat(met[:, 1], n_fiber)
    g22 = np.repeat(met[:, 2], n_fiber)
    vb1 = g11 * vx + g12 * vy
    vb2 = g12 * vx + g22 * vy
    return NormalTables(grid=grid, igrid=igrid, n_fiber=n_fiber,
                        fwd_offsets=offsets, fwd_xs=fx, fwd_ys=fy,
                        fwd_vxs=fvx, fwd_vys=fvy, fwd_wq=fwq,
                        node_flat=node_flat, back_ok=ok, back_cf=cf,
                        back_rf=rf, back_blk=blk, back_vb1=vb1, back_vb2=vb2,
                        cols_per_block=cols)


def apply_forward(tables, h):
    """I_m h over the table's boundary grid (fast path, zero at trapped nodes)."""
    prank, pgrid, pmeta = h.payload()
    vals = K._forward_gather(tables.fwd_offsets, tables.fwd_xs, tables.fwd_ys,
                             tables.fwd_vxs, tables.fwd_vys, tables.fwd_wq,
                             prank, pgrid, pmeta)
    return vals.reshape(tables.grid.n_s, tables.grid.n_theta)


def apply_adjoint(tables, values, rank=2):
    """(I_m)^* of a boundary value table, as a rank-m interior field."""
    grid = tables.grid
    igrid = tables.igrid
    wvals = np.ascontiguousarray(np.where(grid.trapped, 0.0, values))
    acc = K._adjoint_gather(wvals, tables.back_ok, tables.back_cf,
                            tables.back_rf, tables.back_blk,
                            tables.cols_per_block, grid.n_theta,
                            tables.back_vb1, tables.back_vb2, rank,
                            tables.node_flat.size, tables.n_fiber,
                            2.0 * math.pi / tables.n_fiber)
    nc = acc.shape[1]
    data = np.zeros((igrid.nx * igrid.ny, nc))
    data[tables.node_flat] = acc
    return tn.SymTensorField(igrid, rank, data.reshape(igrid.nx, igrid.ny, nc))


def xray_adjoint_m(geom, w, igrid, n_fiber=64, tables=None):
    """Adjoint transform of boundary samples onto an interior grid."""
    if tables is None:
        tables = _cached_tables(geom, w.grid, igrid, n_fiber)
    return apply_adjoint(tables, w.finite_values(), rank=w.rank)


def _cached_tables(geom, grid, igrid, n_fiber):
    key = ("ntab", grid.signature(), n_fiber)
    if key not in igrid._ops:
        igrid._ops[key] = build_normal_tables(geom, grid, igrid, n_fiber)
    return igrid._ops[key]


def normal_apply(geom, f, grid, igrid, n_fiber=64, extension=False,
                 tables=None):
    """Normal operator: adjoint composed with forward on a rank-2 field.

    With ``extension`` the field is zero-extended to the enlarged chart and
    the operator of the extended geometry is applied; the result then lives
    on the extended interior grid.
    """
    if extension:
        geom_e = geom.extended()
        grid_e = boundary_grid(geom_e, grid.n_s, grid.n_theta,
                               theta_max=grid.theta_max, t_cap=grid.t_cap)
        igrid_e = tn.InteriorGrid(geom_e, igrid.nx - 2 * igrid.pad,
                                  pad=igrid.pad)
        f_e = zero_extend(geom, f, igrid_e)
        return normal_apply(geom_e, f_e, grid_e, igrid_e, n_fiber)
    if tables is None:
        tables = _cached_tables(geom, grid, igrid, n_fiber)
    vals = apply_forward(tables, f)
    return apply_adjoint(tables, vals, rank=f.rank)


def zero_extend(geom, f, igrid_e):
    """Evaluate a field's interpolant on another grid, zero outside M."""
    prank, pgrid, pmeta = f.payload()
    Xe = igrid_e.X.ravel()
    Ye = igrid_e.Y.ravel()
    inside = np.array([geom.rho((x, y)) > 1e-12 for x, y in zip(Xe, Ye)])
    nc = f.data.shape[2]
    data = np.zeros((Xe.size, nc))
    ones = np.ones(Xe.size)
    zeros = np.zeros(Xe.size)
    for c in range(nc):
        comp_coef = np.ascontiguousarray(pgrid[:, :, c:c + 1])
        vals = K._interp_batch(comp_coef, pmeta, 0, Xe, Ye, ones, zeros)
        data[:, c] = np.where(inside, vals, 0.0)
    return tn.SymTensorField(igrid_e, f.rank,
                             data.reshape(igrid_e.nx, igrid_e.ny, nc))


def _ls_forward(tables, f):
    """Least-squares forward map: Catmull-Rom gather along stored samples."""
    vals = K._gather_rays_cm(tables.fwd_offsets, tables.fwd_xs, tables.fwd_ys,
                             tables.fwd_vxs, tables.fwd_vys, tables.fwd_wq,
                             np.ascontiguousarray(f.data),
                             f.grid.payload_meta())
    return vals.reshape(tables.grid.n_s, tables.grid.n_theta)


def _ls_adjoint(tables, igrid, wvals):
    """Exact transpose of _ls_forward composed with the inverse Gram."""
    acc = K._scatter_rays_cm(tables.fwd_offsets, tables.fwd_xs, tables.fwd_ys,
                             tables.fwd_vxs, tables.fwd_vys, tables.fwd_wq,
                             wvals.ravel(), igrid.nx, igrid.ny,
                             1 if igrid.periodic_y else 0,
                             igrid.payload_meta())
    vec = acc.transpose(2, 0, 1).reshape(-1)
    return tn.SymTensorField.from_flat(igrid, 2, igrid.gram_inv_apply(2, vec))


def invert_cg(geom, data, igrid, lam=0.0, tol=1e-4, maxiter=60, n_fiber=64,
              tables=None, project_every=1, ray_geom=None):
    """Solenoidal inversion of rank-2 X-ray data by CG on the normal equations.

    Solves (Pi_2 + lam) f = I_2^* data restricted to the solenoidal subspace
    by projecting the Krylov vectors with the solenoidal decomposition.  The
    CG operator pairs the sampled forward map with its exact adjoint, so it
    is self-adjoint positive semidefinite in the Riemannian inner product.
    ``ray_geom`` selects the geometry the data rays were traced in (the
    extension of ``geom`` when inverting zero-extended data per the elliptic
    stability route); the unknown always lives on ``igrid`` of ``geom``,
    supported inside M.  Returns (f_hat, diagnostics); diagnostics carry the
    relative residual and the convergence flag (best iterate either way).
    """
    if tables is None:
        tables = _cached_tables(ray_geom or geom, data.grid, igrid, n_fiber)
    wmask = np.where(data.grid.trapped, 0.0, data.grid.w)

    def project(fld):
        fld.data *= igrid.mask[:, :, None]
        _, fs = tn.solenoidal_decompose(geom, fld)
        return fs

    def A(fld):
        out = _ls_adjoint(tables, igrid, wmask * _ls_forward(tables, fld))
        if lam > 0:
            out = out + lam * fld
        return project(out)

    b = project(_ls_adjoint(tables, igrid, wmask * data.finite_values()))
    nb = tn.l2_norm(b)
    zero = tn.SymTensorField(igrid, 2, np.zeros((igrid.nx, igrid.ny, 3)))
    if nb == 0.0:
        return zero, {"iters": 0, "rel_residual": 0.0, "converged": True,
                      "lambda": lam}
    x = zero
    r = b.copy()
    p = r.copy()
    rs = tn.l2_inner(r, r)
    best = (math.sqrt(rs) / nb, x)
    it = 0
    for it in range(1, maxiter + 1):
        Ap = A(p)
        alpha = rs / tn.l2_inner(p, Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        if it % project_every == 0:
            r = project(r)
        rs_new = tn.l2_inner(r, r)
        rel = math.sqrt(rs_new) / nb
        if rel < best[0]:
            best = (rel, x)
        if rel <= tol:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    rel, x = best
    x = project(x)
    res_data = _ls_forward(tables, x) - data.finite_values()
    diag = {"iters": it, "rel_residual": rel, "converged": rel <= tol,
            "lambda": lam,
            "discrepancy": mu_norm(data.grid, res_data)}
    return x, diag


def h1_norm(igrid, f):
    """Discrete H1 norm: L2 of the field plus L2 of FD component gradients."""
    total = tn.l2_inner(f, f)
    w = igrid.w.ravel()
    for axis in (0, 1):
        D = igrid._deriv_matrix(axis)
        for c in range(f.data.shape[2]):
            g = D @ f.data[:, :, c].ravel()
            total += float(np.sum(w * g * g))
    return math.sqrt(max(total, 0.0))


def stability_diagnostic(geom, trials, grid, igrid, n_fiber=64):
    """Ratios |f|_L2 / |Pi_2 E_0 f|_H1 over a family of solenoidal trials."""
    rows = []
    for f in trials:
        nf = tn.l2_norm(f)
        div = tn.l2_norm(tn.divergence(geom, f))
        if div > 1e-4 * max(nf, 1e-300):
            raise ValueError("stability trial is not solenoidal "
                             f"(|D* f| = {div:.2e} vs |f| = {nf:.2e})")
        pi_f = normal_apply(geom, f, grid, igrid, n_fiber, extension=True)
        h1 = h1_norm(pi_f.grid, pi_f)
        rows.append({"l2_f": nf, "h1_pi": h1, "ratio": nf / h1})
    return rows


@dataclass
class WeightedBoundReport:
    weighted_norm: float
    c0_norm: float
    ratio: float
    delta: float


def weighted_bound_check(geom, h, delta, grid, q_hat=None, tol=1e-10):
    """Exponentially weighted L2 norm of I_2 h against the C0 norm of h."""
    if q_hat is not None and delta >= 0.5 * q_hat:
        raise DeltaTooLarge(f"delta = {delta} >= Q_hat/2 = {0.5 * q_hat}")
    w = xray_m(geom, h, grid, tol=tol)
    m = ~grid.trapped
    wn = math.sqrt(float(np.sum(grid.w[m] * np.exp(2.0 * delta * grid.ell[m])
                                * w.values[m] ** 2)))
    c0 = tn.sup_norm(h)
    return WeightedBoundReport(weighted_norm=wn, c0_norm=c0,
                               ratio=wn / max(c0, 1e-300), delta=delta)
