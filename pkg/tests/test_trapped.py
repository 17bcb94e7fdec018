import math

import numpy as np
import pytest

from lensrig import geometry as geo
from lensrig import trapped as tr
from lensrig.errors import InsufficientDecade


def test_escape_times_flat_center(flat):
    pt = geo.make_phase_point(flat, [0.0, 0.0], [1.0, 0.0])
    tf, tb = tr.escape_times(flat, pt)
    assert abs(tf - 1.0) < 1e-9
    assert abs(tb - 1.0) < 1e-9


def test_escape_times_cylinder(cyl):
    closed = geo.make_phase_point(cyl, [0.0, 1.0], [0.0, 1.0])
    tf, tb = tr.escape_times(cyl, closed, t_cap=50.0)
    assert math.isinf(tf) and math.isinf(tb)
    radial = geo.make_phase_point(cyl, [0.0, 1.0], [1.0, 0.0])
    tf, tb = tr.escape_times(cyl, radial)
    assert abs(tf - 1.0) < 1e-9 and abs(tb - 1.0) < 1e-9


def test_curve_flat_zero_beyond_diameter(flat):
    times = np.array([0.0, 1.0, 2.05, 3.0])
    curve = tr.trapped_volume_curve(flat, times, 2000, seed=4)
    assert curve.mu_hat[2] == 0.0
    assert curve.mu_hat[3] == 0.0
    vol = 2 * math.pi * math.pi
    assert abs(curve.mu_hat[0] - vol) < 1e-3 * vol


def test_curve_volume_and_nesting(cyl):
    times = np.arange(0.0, 12.0, 0.5)
    taus = tr.escape_time_samples(cyl, 20000, seed=5, t_cap=13.0)
    curve = tr.trapped_volume_curve(cyl, times, 20000, seed=5, taus=taus)
    vol = 8 * math.pi ** 2 * math.sinh(1.0)
    assert abs(curve.mu_hat[0] - vol) < 1e-3 * vol
    # nesting is exact on a fixed sample set
    assert np.all(np.diff(curve.mu_hat) <= 0)
    # positive measure well past the diameter
    assert curve.mu_hat[times.searchsorted(9.0)] > 0


def test_curve_deterministic(cyl):
    times = np.arange(0.0, 6.0, 1.0)
    c1 = tr.trapped_volume_curve(cyl, times, 2000, seed=42)
    c2 = tr.trapped_volume_curve(cyl, times, 2000, seed=42)
    assert np.array_equal(c1.mu_hat, c2.mu_hat)


def test_escape_rate_oracle(cyl):
    times = np.arange(0.0, 16.0, 0.5)
    curve = tr.trapped_volume_curve(cyl, times, 100000, seed=6)
    fit = tr.escape_rate_fit(curve, t_min=cyl.diameter_hint())
    assert 0.8 <= fit.q_hat <= 1.2
    assert fit.ci_lo < fit.q_hat < fit.ci_hi


def test_ci_shrinks_with_samples(cyl):
    times = np.arange(0.0, 14.0, 0.5)
    c1 = tr.trapped_volume_curve(cyl, times, 50000, seed=7)
    c2 = tr.trapped_volume_curve(cyl, times, 200000, seed=8)
    f1 = tr.escape_rate_fit(c1, window=(5.5, 9.0))
    f2 = tr.escape_rate_fit(c2, window=(5.5, 9.0))
    w1 = f1.ci_hi - f1.ci_lo
    w2 = f2.ci_hi - f2.ci_lo
    # quadrupling the sample count should halve the interval, roughly
    assert 1.4 <= w1 / w2 <= 2.9


def test_flat_fit_refuses(flat):
    curve = tr.trapped_volume_curve(flat, np.arange(0.0, 5.0, 0.25), 5000,
                                    seed=1)
    with pytest.raises(InsufficientDecade):
        tr.escape_rate_fit(curve, t_min=flat.diameter_hint())


def test_cavalieri_moments_stable(cyl):
    taus1 = tr.escape_time_samples(cyl, 30000, seed=9, t_cap=40.0)
    taus2 = tr.escape_time_samples(cyl, 60000, seed=9, t_cap=40.0)
    vol = cyl.liouville_volume()
    m1 = tr.cavalieri_moments(taus1, vol, 30000)
    m2 = tr.cavalieri_moments(taus2, vol, 60000)
    for p in (1, 2):
        assert m1[p] > 0 and math.isfinite(m1[p])
        assert abs(m1[p] - m2[p]) / m2[p] < 0.05


def test_santalo_flat(flat):
    rep = tr.santalo_compare(flat, lambda x, y, vx, vy: np.ones_like(x),
                             n_s=32, n_theta=64, t_cap=10.0, n_interior=128,
                             n_fiber=32)
    assert abs(rep.lhs - 2 * math.pi ** 2) < 1e-3 * 2 * math.pi ** 2
    assert rep.rel_err <= 1e-3
    assert rep.truncation_bound == 0.0


def test_santalo_flat_odd_function(flat):
    rep = tr.santalo_compare(flat, lambda x, y, vx, vy: vx,
                             n_s=32, n_theta=64, t_cap=10.0, n_interior=96,
                             n_fiber=32)
    scale = 2 * math.pi ** 2
    assert abs(rep.lhs) < 1e-10 * scale
    assert abs(rep.rhs) < 1e-10 * scale


def test_santalo_cylinder(cyl):
    rep = tr.santalo_compare(cyl, lambda x, y, vx, vy: np.ones_like(x),
                             n_s=8, n_theta=128, t_cap=40.0, n_interior=128,
                             n_fiber=16, q_hat=1.0)
    expect = 8 * math.pi ** 2 * math.sinh(1.0)
    assert abs(rep.lhs - expect) < 1e-3 * expect
    assert rep.rel_err <= 1e-2
    assert rep.truncation_bound is not None


def test_santalo_refinement_order(flat):
    # quadrature error should drop at second order or better
    r_coarse = tr.santalo_compare(flat, lambda x, y, vx, vy: 1 + 0.5 * x * vx,
                                  n_s=16, n_theta=24, t_cap=10.0,
                                  n_interior=64, n_fiber=16)
    r_fine = tr.santalo_compare(flat, lambda x, y, vx, vy: 1 + 0.5 * x * vx,
                                n_s=32, n_theta=48, t_cap=10.0,
                                n_interior=128, n_fiber=32)
    assert r_fine.rel_err < r_coarse.rel_err / 2.5


def test_liouville_sampling_counts(conf):
    xs, ys, phis = tr.liouville_samples(conf, 5000, seed=12)
    assert xs.size == 5000
    r2 = xs ** 2 + ys ** 2
    assert np.all(r2 < 1.0)
    assert np.all((phis >= 0) & (phis < 2 * math.pi))


def test_curve_csv(tmp_path, cyl):
    times = np.arange(0.0, 4.0, 1.0)
    curve = tr.trapped_volume_curve(cyl, times, 2000, seed=3)
    path = tmp_path / "curve.csv"
    curve.to_csv(str(path))
    body = np.loadtxt(path, delimiter=",", skiprows=1)
    assert body.shape == (4, 3)
    assert np.allclose(body[:, 1], curve.mu_hat)
