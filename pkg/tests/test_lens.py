import math

import numpy as np
import pytest

from lensrig import geometry as geo
from lensrig import lens
from lensrig import tensors as tn
from lensrig import xray as xr
from lensrig.errors import (BoundaryMetricMismatch, GridMismatch,
                            NonuniqueGeodesic)


def test_flat_dataset_closed_form(flat, flat_bgrid):
    ds = lens.lens_dataset(flat, flat_bgrid)
    S, TH = np.meshgrid(flat_bgrid.s, flat_bgrid.theta, indexing="ij")
    assert np.nanmax(np.abs(ds.ell - 2 * np.cos(TH))) < 1e-8
    wrap = (ds.exit_s - (S + math.pi - 2 * TH)) % (2 * math.pi)
    wrap = np.minimum(wrap, 2 * math.pi - wrap)
    assert np.nanmax(wrap) < 1e-8
    assert np.nanmax(np.abs(ds.exit_theta - TH)) < 1e-8
    assert ds.untrapped_fraction == 1.0


def test_cylinder_radial_rows(cyl, cyl_bgrid):
    ds = lens.lens_dataset(cyl, cyl_bgrid)
    lc = math.cosh(1.0) * 2 * math.pi
    j_mid = cyl_bgrid.n_theta // 2  # theta nodes straddle zero; none exact
    th = cyl_bgrid.theta[j_mid]
    # nearly radial nodes have length close to 2 and exit on the far side
    col_plus = ds.ell[: cyl_bgrid.n_s // 2, j_mid]
    assert np.nanmax(np.abs(col_plus - 2.0)) < 0.05
    assert np.all(ds.exit_s[: cyl_bgrid.n_s // 2, j_mid] >= lc)


def test_conformal_to_flat_limit(flat, flat_bgrid):
    c = 1e-3
    gc = geo.conformal_disk(1.0, [c])
    bgc = xr.boundary_grid(gc, flat_bgrid.n_s, flat_bgrid.n_theta,
                           theta_max=flat_bgrid.theta_max, t_cap=20.0)
    ds_f = lens.lens_dataset(flat, flat_bgrid)
    ds_c = lens.lens_dataset(gc, bgc)
    rep = lens.lens_compare(ds_f, ds_c, flat, gc)
    assert rep.sup_dell > 0
    assert rep.sup_dell <= 10 * c


def test_compare_self_zero(flat, flat_bgrid):
    ds = lens.lens_dataset(flat, flat_bgrid)
    rep = lens.lens_compare(ds, ds)
    assert rep.sup_dell == 0.0
    assert rep.l2_mu_dell == 0.0
    assert rep.sup_exit_mismatch == 0.0
    assert rep.masked_nodes == 0


def test_compare_grid_mismatch(flat, flat_bgrid):
    other = xr.boundary_grid(flat, 32, 16, t_cap=20.0)
    ds1 = lens.lens_dataset(flat, flat_bgrid)
    ds2 = lens.lens_dataset(flat, other)
    with pytest.raises(GridMismatch):
        lens.lens_compare(ds1, ds2)


def test_compare_boundary_mismatch(flat, cyl, flat_bgrid):
    grid_c = xr.boundary_grid(cyl, flat_bgrid.n_s, flat_bgrid.n_theta,
                              theta_max=flat_bgrid.theta_max, t_cap=60.0)
    ds1 = lens.lens_dataset(flat, flat_bgrid)
    ds2 = lens.lens_dataset(cyl, grid_c)
    with pytest.raises(BoundaryMetricMismatch):
        lens.lens_compare(ds1, ds2, flat, cyl)


def test_isometry_constant_function(flat, flat_bgrid):
    ds = lens.lens_dataset(flat, flat_bgrid)
    rep = lens.scattering_isometry_check(
        flat, lambda s, th: np.ones_like(s), ds)
    # total flux measure of the boundary ball: 2 * L * sin(theta_max) ~ 4 pi
    assert abs(rep.norm_outflow ** 2 - 4 * math.pi) <= 1e-5 * 4 * math.pi
    assert rep.rel_err <= 1e-6


def test_isometry_smooth_function(flat, flat_bgrid):
    ds = lens.lens_dataset(flat, flat_bgrid)
    L = flat.boundary_length
    rep = lens.scattering_isometry_check(
        flat, lambda s, th: np.sin(2 * math.pi * s / L) * np.cos(th), ds)
    assert rep.rel_err <= 1e-3


def test_isometry_cylinder_fan_avoiding(cyl, cyl_bgrid):
    ds = lens.lens_dataset(cyl, cyl_bgrid)
    L = cyl.boundary_length
    th_star = math.asin(1.0 / math.cosh(1.0))

    def f(s, th):
        # smooth, vanishing near the trapped fan angles
        fan = np.minimum(np.abs(np.abs(th) - th_star), 0.35) / 0.35
        return np.sin(2 * math.pi * s / L) * np.cos(th) * fan ** 2

    rep = lens.scattering_isometry_check(cyl, f, ds)
    assert rep.rel_err <= 1e-2


def test_variational_conformal_scaling(flat):
    row = geo.boundary_flat_bump(1.0, (0, 0), 0.0, order=0, conformal=True)
    vc = lens.variational_check(flat, [row], s=1.1, theta=0.4, t_step=1e-4,
                                grid_n=128)
    assert abs(vc.lhs - math.cos(0.4)) < 1e-6
    assert abs(vc.alpha_term) < 1e-8
    assert vc.abs_err <= 1e-4 * (1 + vc.ell)


def test_variational_generic_bump_second_order(conf):
    row = geo.boundary_flat_bump(0.05, (1.3, 0.7), 0.2, order=2,
                                 components=(1.0, 0.3, 0.6))
    igrid = tn.InteriorGrid(conf, 192)
    hf = lens.bump_tensor_field(conf, [row], igrid)
    errs = {}
    for ts in (4e-3, 2e-3, 1e-4):
        vc = lens.variational_check(conf, [row], s=2.0, theta=-0.3,
                                    t_step=ts, h_field=hf)
        errs[ts] = vc.abs_err
        assert vc.abs_err <= 1e-4 * (1 + vc.ell)
    # central differences decay at second order until the noise floor
    assert errs[4e-3] <= 4e-4


def test_variational_potential_perturbation(flat):
    # h = D p has vanishing ray transform, so the derivative of the length
    # equals the contact-form term alone
    row = geo.potential_bump(0.05, (0.1, -0.15), 0.55, order=3,
                             covector=(0.8, -0.5))
    igrid = tn.InteriorGrid(flat, 160)
    hf = lens.bump_tensor_field(flat, [row], igrid)
    vc = lens.variational_check(flat, [row], s=0.2, theta=0.15, t_step=1e-4,
                                h_field=hf)
    assert abs(vc.xray_term) <= 1e-5
    assert abs(vc.lhs - vc.alpha_term) <= 1e-5
    assert vc.abs_err <= 1e-4 * (1 + vc.ell)


def test_distance_residual_zero_perturbation(conf):
    row = geo.boundary_flat_bump(0.0, (0, 0), 0.0, order=2)
    pairs = [(0.0, 0.4), (2.0, 2.5)]
    rep = lens.boundary_distance_residual(conf, [row], pairs)
    for r in rep.pairs:
        assert abs(r["R_h"]) < 1e-10


def test_distance_residual_quadratic_band(conf):
    row = geo.boundary_flat_bump(0.05, (1.4, 0.6), 0.3, order=2,
                                 components=(1.0, 0.2, 0.8))
    pairs = [(s, s + 0.45) for s in np.linspace(0, 2 * math.pi * 0.8, 5)]
    rep = lens.boundary_distance_residual(conf, [row], pairs)
    assert rep.fraction_in_band() >= 0.8


def test_distance_antipodal_rejected(flat):
    row = geo.boundary_flat_bump(0.01, (1, 0), 0.0, order=2)
    with pytest.raises(NonuniqueGeodesic):
        lens.boundary_distance_residual(flat, [row], [(0.0, math.pi)])


def test_dataset_csv(tmp_path, flat, flat_bgrid):
    ds = lens.lens_dataset(flat, flat_bgrid)
    path = tmp_path / "lens.csv"
    ds.to_csv(str(path))
    body = np.loadtxt(path, delimiter=",", skiprows=1)
    assert body.shape == (flat_bgrid.n_s * flat_bgrid.n_theta, 6)
    assert np.allclose(body[:, 2].reshape(ds.ell.shape), ds.ell)
