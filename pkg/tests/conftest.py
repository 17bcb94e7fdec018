import math

import numpy as np
import pytest

from lensrig import geometry as geo
from lensrig import tensors as tn
from lensrig import xray as xr


@pytest.fixture(scope="session")
def flat():
    return geo.flat_disk(1.0)


@pytest.fixture(scope="session")
def conf():
    return geo.conformal_disk(1.0, [0.05])


@pytest.fixture(scope="session")
def cyl():
    return geo.hyperbolic_cylinder(1.0)


@pytest.fixture(scope="session")
def flat_bgrid(flat):
    return xr.boundary_grid(flat, 64, 32, t_cap=20.0)


@pytest.fixture(scope="session")
def conf_bgrid(conf):
    return xr.boundary_grid(conf, 64, 32, t_cap=20.0)


@pytest.fixture(scope="session")
def cyl_bgrid(cyl):
    return xr.boundary_grid(cyl, 64, 32, t_cap=60.0)


@pytest.fixture(scope="session")
def flat_igrid(flat):
    return tn.InteriorGrid(flat, 64)


@pytest.fixture(scope="session")
def conf_igrid(conf):
    return tn.InteriorGrid(conf, 64)


@pytest.fixture(scope="session")
def cyl_igrid(cyl):
    return tn.InteriorGrid(cyl, 48)


def sphere_cap_grid():
    """Grid-metric fixture: stereographic sphere of curvature K = 1."""
    n = 161
    xs = np.linspace(-6.5, 6.5, n)
    ys = np.linspace(-6.5, 6.5, n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    conf_fac = (1.0 + (X ** 2 + Y ** 2) / 4.0) ** -2
    zero = np.zeros_like(conf_fac)
    return geo.grid_metric(xs, ys, conf_fac, zero, conf_fac,
                           domain_radius=5.5)
