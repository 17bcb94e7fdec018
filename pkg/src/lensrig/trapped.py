"""Escape-time statistics, empirical escape rate, and Santalo quadrature."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import InsufficientDecade
from .geometry import CYLINDER
from .flow import _check_tol, _trace_one


@dataclass
class EscapeCurve:
    """Monte-Carlo estimates of the volume still inside at each time."""

    times: np.ndarray
    mu_hat: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: int
    volume: float
    t_cap: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("t,mu_hat,stderr\n")
            for i in range(self.times.size):
                fh.write("%.17g,%.17g,%.17g\n"
                         % (self.times[i], self.mu_hat[i], self.stderr[i]))


@dataclass
class EscapeFit:
    q_hat: float
    ci_lo: float
    ci_hi: float
    window: tuple
    n_bins: int

    def as_dict(self):
        return {"Q_hat": self.q_hat, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi,
                "window": list(self.window), "n_bins": self.n_bins}


def escape_times(geom, y, t_cap=200.0, tol=1e-10):
    """Forward and backward escape times of an interior phase point.

    Returns math.inf for directions that survive past the cap.
    """
    taus = []
    for v in (y.v, -y.v):
        rec = _trace_one(geom, y.x, v, t_cap, tol)
        if int(rec[K.REC_STATUS]) == K.ST_EXIT:
            taus.append(float(rec[K.REC_ELL]))
        else:
            taus.append(math.inf)
    return taus[0], taus[1]


def _max_sqrt_det(geom, n=192):
    pts, _ = geom.interior_quadrature(n, n)
    met = K._metric_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                          pts[:, 0].copy(), pts[:, 1].copy())
    det = met[:, 0] * met[:, 2] - met[:, 1] ** 2
    return float(np.sqrt(det.max()))


def liouville_samples(geom, n, seed):
    """Liouville-distributed phase samples: area-weighted x, uniform fiber angle.

    Positions are drawn by rejection with the sqrt(det g) density; the
    per-sample stream order is fixed by the counter-based generator, so the
    result depends only on (geometry, n, seed).
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    bound = _max_sqrt_det(geom) * 1.0000001
    xs = np.empty(n)
    ys = np.empty(n)
    got = 0
    if geom.code == CYLINDER:
        a, lth = geom.params[0], geom.params[1]
        while got < n:
            m = max(4096, 2 * (n - got))
            cx = rng.uniform(-a, a, m)
            cy = rng.uniform(0.0, lth, m)
            u = rng.uniform(0.0, bound, m)
            dens = np.sqrt(np.cosh(cx) ** 2)
            acc = u < dens
            take = min(n - got, int(acc.sum()))
            xs[got:got + take] = cx[acc][:take]
            ys[got:got + take] = cy[acc][:take]
            got += take
    else:
        R = geom.params[0]
        while got < n:
            m = max(4096, 2 * (n - got))
            rr = R * np.sqrt(rng.uniform(0.0, 1.0, m))
            ph = rng.uniform(0.0, 2 * math.pi, m)
            cx = rr * np.cos(ph)
            cy = rr * np.sin(ph)
            u = rng.uniform(0.0, bound, m)
            met = K._metric_batch(geom.code, geom.params, geom.grid_data,
                                  geom.bumps, cx, cy)
            dens = np.sqrt(met[:, 0] * met[:, 2] - met[:, 1] ** 2)
            acc = u < dens
            take = min(n - got, int(acc.sum()))
            xs[got:got + take] = cx[acc][:take]
            ys[got:got + take] = cy[acc][:take]
            got += take
    phis = rng.uniform(0.0, 2 * math.pi, n)
    return xs, ys, phis


def escape_time_samples(geom, n_samples, seed, t_cap, tol=1e-6,
                        return_drift=False):
    """Forward escape times of n Liouville samples (capped at t_cap)."""
    _check_tol(tol)
    xs, ys, phis = liouville_samples(geom, n_samples, seed)
    taus, drift = K._escape_batch(geom.code, geom.params, geom.grid_data,
                                  geom.bumps, xs, ys, phis, t_cap, tol,
                                  geom.hull_factor)
    if return_drift:
        return taus, drift
    return taus


def trapped_volume_curve(geom, times, n_samples, seed, t_cap=None, tol=1e-6,
                         taus=None):
    """Monte-Carlo curve of the Liouville volume trapped past each time."""
    if n_samples < 1000:
        raise ValueError("need at least 10^3 samples")
    times = np.asarray(times, dtype=float)
    if t_cap is None:
        t_cap = float(times.max()) * 1.05 + 1.0
    if taus is None:
        taus = escape_time_samples(geom, n_samples, seed, t_cap, tol)
    vol = geom.liouville_volume()
    p = np.array([(taus > t).mean() for t in times])
    mu = vol * p
    se = vol * np.sqrt(p * (1.0 - p) / n_samples)
    return EscapeCurve(times=times, mu_hat=mu, stderr=se,
                       n_samples=n_samples, seed=seed, volume=vol, t_cap=t_cap)


def escape_rate_fit(curve, window=None, t_min=0.0, min_hits=30,
                    min_decade=10.0):
    """Weighted least-squares fit of log mu_hat over a decay window.

    The automatic window is the widest [t_i, t_j] past the transient cutoff
    ``t_min`` (pass the geometry diameter) with at least one decade of decay
    and at least ``min_hits`` surviving samples per retained bin.
    """
    t = curve.times
    mu = curve.mu_hat
    counts = mu / curve.volume * curve.n_samples
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1]) & (counts >= 1)
        idx = np.flatnonzero(sel)
        if idx.size < 3 or mu[idx[0]] <= 0 or mu[idx[-1]] <= 0 \
                or mu[idx[0]] / max(mu[idx[-1]], 1e-300) < min_decade:
            raise InsufficientDecade("requested window spans less than one decade")
    else:
        valid = np.flatnonzero((counts >= min_hits) & (mu > 0) & (t >= t_min))
        best = None
        for i in valid:
            for j in valid[::-1]:
                if j <= i + 2:
                    continue
                if mu[j] <= 0 or mu[i] / mu[j] < min_decade:
                    continue
                span = t[j] - t[i]
                if best is None or span > best[0]:
                    best = (span, i, j)
                break
        if best is None:
            raise InsufficientDecade("no window with one decade of decay and "
                                     f">= {min_hits} hits per bin")
        i, j = best[1], best[2]
        idx = np.flatnonzero((t >= t[i]) & (t <= t[j]) & (counts >= min_hits)
                             & (mu > 0))
        window = (float(t[i]), float(t[j]))
    tt = t[idx]
    yy = np.log(mu[idx])
    ww = counts[idx]
    tbar = np.sum(ww * tt) / np.sum(ww)
    sxx = np.sum(ww * (tt - tbar) ** 2)
    slope = np.sum(ww * (tt - tbar) * yy) / sxx
    se_slope = 1.0 / math.sqrt(sxx)
    q = -slope
    return EscapeFit(q_hat=float(q), ci_lo=float(q - 1.96 * se_slope),
                     ci_hi=float(q + 1.96 * se_slope), window=window,
                     n_bins=int(idx.size))


def cavalieri_moments(taus, volume, n_samples, powers=(1, 2)):
    """Empirical cap-truncated moments of the escape time."""
    out = {}
    for p in powers:
        out[p] = float(volume * np.mean(np.asarray(taus) ** p))
    return out


@dataclass
class SantaloReport:
    lhs: float
    rhs: float
    rel_err: float
    trapped_fraction: float
    truncation_bound: Optional[float]

    def as_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "rel_err": self.rel_err,
                "trapped_fraction": self.trapped_fraction,
                "truncation_bound": self.truncation_bound}


def santalo_compare(geom, f, n_s=64, n_theta=96, t_cap=60.0, theta_max=None,
                    n_interior=128, n_fiber=64, tol=1e-10, dt=0.05,
                    q_hat=None, c_hat=None):
    """Both sides of the Santalo identity for a bounded phase-space function.

    ``f(x, y, vx, vy)`` must accept numpy arrays.  The left side integrates
    over the unit bundle (chart-fitted area quadrature times uniform fiber
    angles); the right side integrates f along every traced ray of a
    boundary grid with the cos(theta) flux weight.  Trapped rays contribute
    their [0, t_cap] portion; the reported truncation bound is
    c_hat * exp(-q_hat * t_cap) * sup|f| when an escape-rate estimate is
    supplied.
    """
    from .xray import boundary_grid  # local import to avoid a cycle

    # left side: interior phase-space quadrature
    pts, w_geo = geom.interior_quadrature(n_interior, n_interior)
    met = K._metric_batch(geom.code, geom.params, geom.grid_data, geom.bumps,
                          pts[:, 0].copy(), pts[:, 1].copy())
    det = met[:, 0] * met[:, 2] - met[:, 1] ** 2
    sq = np.sqrt(det)
    e1x = 1.0 / np.sqrt(met[:, 0])
    fac = np.sqrt(met[:, 0] / det)
    e2x = -met[:, 1] / met[:, 0] * fac
    e2y = fac
    lhs = 0.0
    dphi = 2.0 * math.pi / n_fiber
    sup_f = 0.0
    for k in range(n_fiber):
        phi = (k + 0.5) * dphi
        vx = math.cos(phi) * e1x + math.sin(phi) * e2x
        vy = math.sin(phi) * e2y
        vals = np.asarray(f(pts[:, 0], pts[:, 1], vx, vy), dtype=float)
        sup_f = max(sup_f, float(np.max(np.abs(vals))))
        lhs += float(np.sum(w_geo * sq * vals)) * dphi

    # right side: boundary grid and along-ray quadrature
    bg = boundary_grid(geom, n_s, n_theta, theta_max=theta_max, t_cap=t_cap,
                       tol=tol)
    rhs = 0.0
    for i in range(n_s):
        for j in range(n_theta):
            rec = bg.records[i, j]
            ell = rec[K.REC_ELL]
            if ell <= 0:
                continue
            npan = max(2, int(math.ceil(ell / (2 * dt))))
            xs, ys, vxs, vys, wq = _ray_samples(geom, bg, i, j, ell, npan)
            vals = np.asarray(f(xs, ys, vxs, vys), dtype=float)
            rhs += bg.w[i, j] * float(np.sum(wq * vals))
    rel = abs(lhs - rhs) / max(abs(lhs), 1e-300)
    tf = float(bg.trapped.mean())
    bound = None
    if tf == 0.0:
        bound = 0.0
    elif q_hat is not None:
        c = c_hat if c_hat is not None else 2.0 * geom.liouville_volume()
        bound = c * math.exp(-q_hat * t_cap) * sup_f
    return SantaloReport(lhs=lhs, rhs=rhs, rel_err=rel, trapped_fraction=tf,
                         truncation_bound=bound)


def _ray_samples(geom, bg, i, j, ell, npan):
    from .flow import entry_phase_arrays, resample_ray

    xs0, ys0, vx0, vy0 = entry_phase_arrays(geom, np.array([bg.s[i]]),
                                            np.array([bg.theta[j]]))
    return resample_ray(geom, (xs0[0], ys0[0]), (vx0[0], vy0[0]), ell, npan)
