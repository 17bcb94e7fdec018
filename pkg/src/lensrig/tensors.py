"""Symmetric tensor calculus on structured interior grids.

Fields of rank 0, 1, 2 are sampled on a rectangle covering the chart (with
a padding margin so every stencil touching the domain is centered), with a
mask marking nodes inside M.  The symmetric derivative is a 4th-order
finite-difference covariant derivative assembled as a sparse matrix; the
divergence is its exact adjoint with respect to the Riemannian L2 inner
product on the mask, which makes the Dirichlet operator D*D symmetric
positive definite by construction.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels as K
from .errors import NoConvergence, RankUnsupported
from .geometry import CYLINDER, Geometry

_NCOMP = {0: 1, 1: 2, 2: 3}


class InteriorGrid:
    """Structured grid over the chart with an inside-M mask and Gram weights."""

    def __init__(self, geom, n, n2=None, pad=4):
        self.geom = geom
        self.pad = pad
        if geom.code == CYLINDER:
            a, lth = geom.params[0], geom.params[1]
            hx = 2.0 * a / (n - 1)
            self.nx = n + 2 * pad
            x0 = -a - pad * hx
            ny = n2 if n2 is not None else int(round(lth / hx))
            hy = lth / ny
            self.ny = ny
            y0 = 0.0
            self.periodic_y = True
        else:
            R = geom.params[0]
            hx = 2.0 * R / (n - 1)
            hy = hx
            self.nx = n + 2 * pad
            self.ny = n + 2 * pad
            x0 = -R - pad * hx
            y0 = -R - pad * hy
            self.periodic_y = False
        self.hx, self.hy = hx, hy
        self.x0, self.y0 = x0, y0
        self.xs = x0 + hx * np.arange(self.nx)
        self.ys = y0 + hy * np.arange(self.ny)
        self.X, self.Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        rho = np.empty((self.nx, self.ny))
        for i in range(self.nx):
            for j in range(self.ny):
                rho[i, j] = geom.rho((self.X[i, j], self.Y[i, j]))
        self.mask = rho > 1e-12
        self.interior = self._erode(self.mask)
        self.ring = self.mask & ~self.interior
        # region where the adjoint-side divergence is a consistent stencil
        # (one full stencil reach inside the mask edge)
        core = self.interior
        for _ in range(2):
            core = self._erode(core)
        self.div_region = core
        met = K._metric_batch(geom.code, geom.params, geom.grid_data,
                              geom.bumps, self.X.ravel(), self.Y.ravel())
        self.g = met.reshape(self.nx, self.ny, 3)
        det = self.g[:, :, 0] * self.g[:, :, 2] - self.g[:, :, 1] ** 2
        self.sqrt_det = np.sqrt(det)
        self.w = np.where(self.mask, hx * hy * self.sqrt_det, 0.0)
        self._ops = {}

    def _erode(self, m):
        out = m.copy()
        out[1:, :] &= m[:-1, :]
        out[:-1, :] &= m[1:, :]
        if self.periodic_y:
            out &= np.roll(m, 1, axis=1)
            out &= np.roll(m, -1, axis=1)
        else:
            out[:, 1:] &= m[:, :-1]
            out[:, :-1] &= m[:, 1:]
        return out

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def h_grid(self):
        return max(self.hx, self.hy)

    def payload_meta(self):
        return np.array([self.x0, self.y0, self.hx, self.hy,
                         float(self.nx), float(self.ny),
                         1.0 if self.periodic_y else 0.0])

    # ---- sparse operator assembly ------------------------------------------

    def _deriv_matrix(self, axis):
        """4th-order first-derivative matrix along one axis (cached)."""
        key = ("d", axis)
        if key in self._ops:
            return self._ops[key]
        n = self.nx if axis == 0 else self.ny
        h = self.hx if axis == 0 else self.hy
        periodic = self.periodic_y and axis == 1
        rows, cols, vals = [], [], []
        cen = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
        cen_off = [-2, -1, 0, 1, 2]
        # one-sided 4th-order stencils for the first/last two lines
        fwd = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12.0 * h)
        fwd1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / (12.0 * h)
        for i in range(n):
            if periodic:
                off, st = cen_off, cen
                for o, c in zip(off, st):
                    rows.append(i)
                    cols.append((i + o) % n)
                    vals.append(c)
                continue
            if i < 2 or i > n - 3:
                if i == 0:
                    off, st = [0, 1, 2, 3, 4], fwd
                elif i == 1:
                    off, st = [-1, 0, 1, 2, 3], fwd1
                elif i == n - 2:
                    off, st = [1, 0, -1, -2, -3], -fwd1
                else:
                    off, st = [0, -1, -2, -3, -4], -fwd
            else:
                off, st = cen_off, cen
            for o, c in zip(off, st):
                rows.append(i)
                cols.append(i + o)
                vals.append(c)
        D1 = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        if axis == 0:
            M = sp.kron(D1, sp.identity(self.ny, format="csr"), format="csr")
        else:
            M = sp.kron(sp.identity(self.nx, format="csr"), D1, format="csr")
        self._ops[key] = M
        return M

    def _gamma_diag(self):
        key = "gamma"
        if key in self._ops:
            return self._ops[key]
        G = K._christoffel_batch(self.geom.code, self.geom.params,
                                 self.geom.grid_data, self.geom.bumps,
                                 self.X.ravel(), self.Y.ravel())
        self._ops[key] = G
        return G

    def sym_deriv_matrix(self, rank):
        """Sparse D_g from rank-m to rank-(m+1) component vectors."""
        key = ("D", rank)
        if key in self._ops:
            return self._ops[key]
        N = self.n_nodes
        Dx = self._deriv_matrix(0)
        Dy = self._deriv_matrix(1)
        if rank == 0:
            M = sp.vstack([Dx, Dy], format="csr")
        elif rank == 1:
            G = self._gamma_diag()
            d = lambda col: sp.diags(G[:, col])
            Z = sp.csr_matrix((N, N))
            # rows: (Dp)_11, (Dp)_12, (Dp)_22 acting on (p1, p2)
            r11 = sp.hstack([Dx - d(0), -d(3)])
            r12 = sp.hstack([0.5 * Dy - d(1), 0.5 * Dx - d(4)])
            r22 = sp.hstack([-d(2), Dy - d(5)])
            M = sp.vstack([r11, r12, r22], format="csr")
        else:
            raise RankUnsupported(f"sym derivative of rank {rank} not supported")
        self._ops[key] = M
        return M

    def gram(self, rank):
        """Block-diagonal Gram matrix of the masked L2 inner product."""
        key = ("G", rank)
        if key in self._ops:
            return self._ops[key]
        N = self.n_nodes
        w = self.w.ravel()
        g = self.g.reshape(N, 3)
        det = g[:, 0] * g[:, 2] - g[:, 1] ** 2
        al = g[:, 2] / det
        be = -g[:, 1] / det
        ga = g[:, 0] / det
        if rank == 0:
            M = sp.diags(w)
        elif rank == 1:
            M = sp.bmat([[sp.diags(w * al), sp.diags(w * be)],
                         [sp.diags(w * be), sp.diags(w * ga)]], format="csr")
        elif rank == 2:
            M = sp.bmat([
                [sp.diags(w * al * al), sp.diags(2 * w * al * be), sp.diags(w * be * be)],
                [sp.diags(2 * w * al * be), sp.diags(2 * w * (be * be + al * ga)),
                 sp.diags(2 * w * be * ga)],
                [sp.diags(w * be * be), sp.diags(2 * w * be * ga), sp.diags(w * ga * ga)],
            ], format="csr")
        else:
            raise RankUnsupported(f"no Gram matrix for rank {rank}")
        self._ops[key] = M
        return M

    def gram_inv_apply(self, rank, vec):
        """Apply the nodewise inverse Gram (zero outside the mask)."""
        N = self.n_nodes
        w = self.w.ravel()
        ok = w > 0
        g = self.g.reshape(N, 3)
        out = np.zeros_like(vec)
        if rank == 0:
            out[ok] = vec[ok] / w[ok]
            return out
        if rank == 1:
            # inverse of w * g^inv is g / w
            a = np.where(ok, g[:, 0] / np.where(ok, w, 1.0), 0.0)
            b = np.where(ok, g[:, 1] / np.where(ok, w, 1.0), 0.0)
            c = np.where(ok, g[:, 2] / np.where(ok, w, 1.0), 0.0)
            v1, v2 = vec[:N], vec[N:]
            out[:N] = a * v1 + b * v2
            out[N:] = b * v1 + c * v2
            return out
        if rank == 2:
            # Gram block is w * S * L(g^inv) with S = diag(1,2,1) and
            # L(A): F -> A F A; its inverse is L(g) * S^{-1} / w
            a, b, c = g[:, 0], g[:, 1], g[:, 2]
            v1, v3 = vec[:N], vec[2 * N:]
            v2 = 0.5 * vec[N:2 * N]
            u1 = a * a * v1 + 2 * a * b * v2 + b * b * v3
            u2 = a * b * v1 + (b * b + a * c) * v2 + b * c * v3
            u3 = b * b * v1 + 2 * b * c * v2 + c * c * v3
            scale = np.where(ok, w, 1.0)
            out[:N] = np.where(ok, u1 / scale, 0.0)
            out[N:2 * N] = np.where(ok, u2 / scale, 0.0)
            out[2 * N:] = np.where(ok, u3 / scale, 0.0)
            return out
        raise RankUnsupported(f"no Gram inverse for rank {rank}")

    def dirichlet_operator(self):
        """Sparse SPD operator D^T G2 D restricted to interior unknowns."""
        key = "A_int"
        if key in self._ops:
            return self._ops[key]
        D = self.sym_deriv_matrix(1)
        G2 = self.gram(2)
        A = (D.T @ G2 @ D).tocsr()
        idx = np.flatnonzero(self.interior.ravel())
        dofs = np.concatenate([idx, idx + self.n_nodes])
        A_int = A[np.ix_(dofs, dofs)].tocsr()
        self._ops[key] = (A_int, dofs)
        return self._ops[key]


@dataclass
class SymTensorField:
    """Rank-m symmetric tensor field sampled on an interior grid."""

    grid: InteriorGrid
    rank: int
    data: np.ndarray  # (nx, ny, ncomp)

    def __post_init__(self):
        if self.rank not in _NCOMP:
            raise RankUnsupported(f"rank {self.rank} not in {{0, 1, 2}}")
        if self.data.shape != (*self.grid.shape, _NCOMP[self.rank]):
            raise ValueError("component array shape mismatch")

    def copy(self):
        return SymTensorField(self.grid, self.rank, self.data.copy())

    def flat(self):
        """Component-major flattened vector (comp, node)."""
        return self.data.transpose(2, 0, 1).reshape(-1)

    @classmethod
    def from_flat(cls, grid, rank, vec):
        nc = _NCOMP[rank]
        data = vec.reshape(nc, *grid.shape).transpose(1, 2, 0).copy()
        return cls(grid, rank, data)

    def payload(self):
        """(prank, pgrid, pmeta) triple for the compiled ray kernels.

        The returned grid holds B-spline coefficients of the components.
        """
        from .geometry import spline_coefficients
        coef = spline_coefficients(self.data, self.grid.periodic_y)
        return self.rank, coef, self.grid.payload_meta()

    def __add__(self, other):
        return SymTensorField(self.grid, self.rank, self.data + other.data)

    def __sub__(self, other):
        return SymTensorField(self.grid, self.rank, self.data - other.data)

    def __mul__(self, c):
        return SymTensorField(self.grid, self.rank, self.data * float(c))

    __rmul__ = __mul__

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            names = ",".join(f"c{k}" for k in range(self.data.shape[2]))
            fh.write(f"x,y,{names}\n")
            for i in range(self.grid.nx):
                for j in range(self.grid.ny):
                    comps = ",".join("%.17g" % v for v in self.data[i, j])
                    fh.write("%.17g,%.17g,%s\n" % (self.grid.xs[i],
                                                   self.grid.ys[j], comps))

    @classmethod
    def from_csv(cls, grid, rank, path):
        body = np.loadtxt(path, delimiter=",", skiprows=1)
        nc = _NCOMP[rank]
        data = body[:, 2:2 + nc].reshape(grid.nx, grid.ny, nc)
        return cls(grid, rank, data)


def field_from_function(grid, rank, fn):
    """Sample a closed-form field: fn(X, Y) -> tuple of component arrays."""
    comps = fn(grid.X, grid.Y)
    if isinstance(comps, np.ndarray):
        comps = (comps,)
    data = np.stack([np.asarray(c, dtype=float) for c in comps], axis=2)
    return SymTensorField(grid, rank, data)


def metric_field(grid):
    """The metric tensor itself as a rank-2 field."""
    return SymTensorField(grid, 2, grid.g.copy())


def symmetrize(grid, tensor):
    """Symmetrization of a full m-tensor node array (m <= 2).

    Accepts shapes (nx, ny) for m=0, (nx, ny, 2) for m=1, and
    (nx, ny, 2, 2) for m=2; averages over index permutations.
    """
    t = np.asarray(tensor, dtype=float)
    if t.shape == grid.shape:
        return SymTensorField(grid, 0, t[:, :, None].copy())
    if t.shape == (*grid.shape, 2):
        return SymTensorField(grid, 1, t.copy())
    if t.shape == (*grid.shape, 2, 2):
        sym = 0.5 * (t + t.transpose(0, 1, 3, 2))
        data = np.stack([sym[:, :, 0, 0], sym[:, :, 0, 1], sym[:, :, 1, 1]], axis=2)
        return SymTensorField(grid, 2, data)
    raise RankUnsupported(f"cannot symmetrize array of shape {t.shape}")


def pullback_m(geom, h, x, v):
    """Pointwise pullback h_x(v^{(x} m}) with bicubic coefficient interpolation."""
    prank, pgrid, pmeta = h.payload()
    return float(K._payload_eval(prank, pgrid, pmeta, x[0], x[1], v[0], v[1]))


def sym_derivative(geom, p):
    """Symmetric covariant derivative, rank m -> m+1 (m <= 1)."""
    if p.rank > 1:
        raise RankUnsupported("sym derivative defined for ranks 0 and 1 only")
    D = p.grid.sym_deriv_matrix(p.rank)
    return SymTensorField.from_flat(p.grid, p.rank + 1, D @ p.flat())


def divergence(geom, f):
    """Adjoint of the symmetric derivative (the divergence), rank m+1 -> m.

    Defined on the interior of the mask (zero on the constrained boundary
    band, where the discrete adjoint carries the boundary-flux layer).
    """
    if f.rank < 1:
        raise RankUnsupported("divergence defined for ranks 1 and 2 only")
    grid = f.grid
    D = grid.sym_deriv_matrix(f.rank - 1)
    G = grid.gram(f.rank)
    out = grid.gram_inv_apply(f.rank - 1, D.T @ (G @ f.flat()))
    fld = SymTensorField.from_flat(grid, f.rank - 1, out)
    fld.data *= grid.div_region[:, :, None]
    return fld


def l2_inner(f1, f2):
    """Riemannian L2 inner product over the mask."""
    if f1.rank != f2.rank:
        raise ValueError("rank mismatch in inner product")
    G = f1.grid.gram(f1.rank)
    return float(f1.flat() @ (G @ f2.flat()))


def l2_norm(f):
    return math.sqrt(max(l2_inner(f, f), 0.0))


def sup_norm(f):
    """Max nodal pointwise g-norm over the mask (C0 norm surrogate)."""
    grid = f.grid
    N = grid.n_nodes
    G = grid.gram(f.rank)
    w = grid.w.ravel()
    ok = w > 0
    v = f.flat()
    q = v * (G @ v)
    nc = _NCOMP[f.rank]
    dens = np.zeros(N)
    for c in range(nc):
        dens += q[c * N:(c + 1) * N]
    dens[ok] /= w[ok]
    dens[~ok] = 0.0
    return math.sqrt(max(float(dens.max()), 0.0))


def dirichlet_solve(geom, rhs, tol=1e-9, maxiter=4000, x0=None):
    """Solve D*D p = rhs with p = 0 on the masked boundary ring.

    ``rhs`` is a rank-1 field; the returned p is a rank-1 field vanishing
    outside the interior unknowns.  Preconditioned CG (Jacobi) on the SPD
    covector-side system.
    """
    grid = rhs.grid
    A_int, dofs = grid.dirichlet_operator()
    G1 = grid.gram(1)
    b_full = G1 @ rhs.flat()
    b = b_full[dofs]
    if np.linalg.norm(b) == 0.0:
        return SymTensorField(grid, 1, np.zeros((*grid.shape, 2)))
    diag = A_int.diagonal()
    diag[diag <= 0] = 1.0
    M = sp.diags(1.0 / diag)
    x_init = None if x0 is None else x0.flat()[dofs]
    sol, info = spla.cg(A_int, b, x0=x_init, rtol=tol, atol=0.0, M=M,
                        maxiter=maxiter)
    res = float(np.linalg.norm(A_int @ sol - b) / np.linalg.norm(b))
    vec = np.zeros(2 * grid.n_nodes)
    vec[dofs] = sol
    p = SymTensorField.from_flat(grid, 1, vec)
    if info != 0:
        raise NoConvergence(f"Dirichlet CG stalled at residual {res:.3e}",
                            best=p, diagnostics={"residual": res, "info": info})
    return p


def solenoidal_decompose(geom, f, tol=1e-10, maxiter=6000):
    """Split a rank-2 field into D p + f_s with p|_ring = 0 and D* f_s ~ 0."""
    grid = f.grid
    D1 = grid.sym_deriv_matrix(1)
    G2 = grid.gram(2)
    rhs_cov = D1.T @ (G2 @ f.flat())
    A_int, dofs = grid.dirichlet_operator()
    b = rhs_cov[dofs]
    if np.linalg.norm(b) == 0.0:
        p = SymTensorField(grid, 1, np.zeros((*grid.shape, 2)))
        return p, f.copy()
    diag = A_int.diagonal()
    diag[diag <= 0] = 1.0
    M = sp.diags(1.0 / diag)
    sol, info = spla.cg(A_int, b, rtol=tol, atol=0.0, M=M, maxiter=maxiter)
    vec = np.zeros(2 * grid.n_nodes)
    vec[dofs] = sol
    p = SymTensorField.from_flat(grid, 1, vec)
    if info != 0:
        res = float(np.linalg.norm(A_int @ sol - b) / np.linalg.norm(b))
        raise NoConvergence(f"decomposition CG stalled at residual {res:.3e}",
                            best=p, diagnostics={"residual": res})
    f_s = f - sym_derivative(geom, p)
    return p, f_s
