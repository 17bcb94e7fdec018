"""Configuration-driven command surface emitting CSV/JSON artifacts.

Commands: audit, lens, santalo, escape, xray, invert, verify.  Every
command is deterministic given (config, seed): reruns produce byte-identical
files.  Exit status 0 means all checks passed, 1 means a check failed, and
2 means a configuration or I/O error.
"""

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from . import lens as lens_mod
from . import tensors as tn
from . import trapped as trap
from . import xray as xr
from .errors import ConfigParse, InsufficientDecade, LensrigError
from .geometry import (boundary_flat_bump, convexity_audit,
                       geometry_from_config)


def load_config(path):
    """Parse a TOML or JSON run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigParse(f"cannot read config {path}: {exc}") from exc
    try:
        if path.endswith(".json"):
            cfg = json.loads(raw.decode())
        else:
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            cfg = tomllib.loads(raw.decode())
    except Exception as exc:
        raise ConfigParse(f"cannot parse config {path}: {exc}") from exc
    if "geometry" not in cfg:
        raise ConfigParse("config lacks a [geometry] section")
    return cfg


class RunConfig:
    """Validated run parameters with documented tolerance ranges."""

    def __init__(self, cfg, out_override=None, seed_override=None):
        self.cfg = cfg
        self.geometry = geometry_from_config(cfg["geometry"])
        grids = cfg.get("grids", {})
        self.n_s = int(grids.get("n_s", 64))
        self.n_theta = int(grids.get("n_theta", 32))
        self.theta_max = grids.get("theta_max", None)
        self.interior = int(grids.get("interior", 64))
        self.n_fiber = int(grids.get("n_fiber", 64))
        tols = cfg.get("tolerances", {})
        self.tol = float(tols.get("integrator", 1e-10))
        self.exit_tol = float(tols.get("exit", 1e-10))
        self.cg_tol = float(tols.get("cg", 1e-8))
        if not (1e-13 <= self.tol <= 1e-6):
            raise ConfigParse(f"integrator tolerance {self.tol} out of range")
        if self.exit_tol < 1e-13:
            raise ConfigParse("exit tolerance below the achievable 1e-13")
        if not (1e-14 <= self.cg_tol <= 1e-2):
            raise ConfigParse(f"cg tolerance {self.cg_tol} out of range")
        run = cfg.get("run", {})
        self.t_cap = float(run.get("T_cap", 200.0))
        self.seed_explicit = seed_override is not None or "seed" in run
        self.seed = int(seed_override if seed_override is not None
                        else run.get("seed", 1))
        self.out = out_override or run.get("out", ".")
        canon = json.dumps(cfg, sort_keys=True, default=str).encode()
        self.config_hash = hashlib.sha256(canon).hexdigest()[:16]

    def outpath(self, name):
        os.makedirs(self.out, exist_ok=True)
        return os.path.join(self.out, name)

    def report(self, extra):
        base = {"config_hash": self.config_hash, "version": __version__,
                "geometry": self.geometry.family, "seed": self.seed}
        base.update(extra)
        return base


def _np_default(o):
    if hasattr(o, "item"):
        return o.item()
    return str(o)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_np_default)
        fh.write("\n")


def cmd_audit(rc):
    rep = convexity_audit(rc.geometry, n_samples=256)
    out = rc.report({"audit": rep.as_dict()})
    _write_json(rc.outpath("audit.json"), out)
    print(json.dumps(out["audit"], sort_keys=True))
    return 0 if rep.passed else 1


def cmd_lens(rc):
    grid = xr.boundary_grid(rc.geometry, rc.n_s, rc.n_theta,
                            theta_max=rc.theta_max, t_cap=rc.t_cap, tol=rc.tol)
    ds = lens_mod.lens_dataset(rc.geometry, grid)
    path = rc.outpath("lens.csv")
    ds.to_csv(path)
    _write_json(rc.outpath("lens.json"), rc.report(
        {"rows": grid.n_s * grid.n_theta, "trapped": int(ds.trapped.sum()),
         "untrapped_fraction": ds.untrapped_fraction}))
    print(f"wrote {path} ({grid.n_s * grid.n_theta} rows, "
          f"{int(ds.trapped.sum())} trapped)")
    return 0


def cmd_santalo(rc):
    scfg = rc.cfg.get("santalo", {})
    rep = trap.santalo_compare(
        rc.geometry, lambda x, y, vx, vy: np.ones_like(x),
        n_s=rc.n_s, n_theta=rc.n_theta, t_cap=rc.t_cap,
        theta_max=rc.theta_max, n_interior=int(scfg.get("n_interior", 128)),
        n_fiber=int(scfg.get("n_fiber", 32)), tol=rc.tol,
        q_hat=scfg.get("q_hat"))
    out = rc.report({"santalo": rep.as_dict()})
    _write_json(rc.outpath("santalo.json"), out)
    print(json.dumps(out["santalo"], sort_keys=True))
    tol = float(scfg.get("rel_err_bound", 1e-2))
    return 0 if rep.rel_err <= tol else 1


def cmd_escape(rc):
    if not rc.seed_explicit:
        raise ConfigParse("Monte-Carlo commands need an explicit seed "
                          "([run].seed or --seed)")
    ecfg = rc.cfg.get("escape", {})
    n = int(ecfg.get("n_samples", 100000))
    t_max = float(ecfg.get("t_max", 20.0))
    dt = float(ecfg.get("dt", 0.5))
    times = np.arange(0.0, t_max + 0.5 * dt, dt)
    curve = trap.trapped_volume_curve(rc.geometry, times, n, seed=rc.seed,
                                      tol=max(rc.tol, 1e-8))
    curve.to_csv(rc.outpath("escape.csv"))
    try:
        fit = trap.escape_rate_fit(curve, t_min=rc.geometry.diameter_hint())
        out = rc.report({"fit": fit.as_dict(), "n_samples": n})
        code = 0
    except InsufficientDecade as exc:
        out = rc.report({"fit": None, "error": f"InsufficientDecade: {exc}",
                         "n_samples": n})
        code = 0
    _write_json(rc.outpath("escape.json"), out)
    print(json.dumps(out.get("fit") or out["error"], sort_keys=True))
    return code


def _config_field(rc, igrid):
    """Rank-2 test field selected by the [field] config section."""
    fcfg = rc.cfg.get("field", {"kind": "metric"})
    kind = fcfg.get("kind", "metric")
    if kind == "metric":
        return tn.metric_field(igrid)
    if kind == "bump":
        row = boundary_flat_bump(
            float(fcfg.get("amp", 0.1)),
            tuple(fcfg.get("wavevec", (1.0, 0.5))),
            float(fcfg.get("phase", 0.0)), order=int(fcfg.get("order", 2)),
            components=tuple(fcfg.get("components", (1.0, 0.0, 1.0))))
        return lens_mod.bump_tensor_field(rc.geometry, [row], igrid)
    raise ConfigParse(f"unknown field kind {kind!r}")


def cmd_xray(rc):
    grid = xr.boundary_grid(rc.geometry, rc.n_s, rc.n_theta,
                            theta_max=rc.theta_max, t_cap=rc.t_cap, tol=rc.tol)
    igrid = tn.InteriorGrid(rc.geometry, rc.interior)
    field = _config_field(rc, igrid)
    samples = xr.xray_m(rc.geometry, field, grid, tol=rc.tol)
    path = rc.outpath("xray.csv")
    samples.to_csv(path)
    print(f"wrote {path}")
    return 0


def cmd_invert(rc, data_path):
    icfg = rc.cfg.get("invert", {})
    if data_path is None:
        data_path = icfg.get("data")
    if data_path is None:
        raise ConfigParse("invert needs a data CSV (--data or [invert].data)")
    try:
        body = np.loadtxt(data_path, delimiter=",", skiprows=1)
    except OSError as exc:
        raise ConfigParse(f"cannot read data file {data_path}: {exc}") from exc
    grid = xr.boundary_grid(rc.geometry, rc.n_s, rc.n_theta,
                            theta_max=rc.theta_max, t_cap=rc.t_cap, tol=rc.tol)
    if body.shape[0] != grid.n_s * grid.n_theta:
        raise ConfigParse(
            f"data rows {body.shape[0]} do not match grid "
            f"{grid.n_s}x{grid.n_theta}")
    vals = body[:, 3].reshape(grid.n_s, grid.n_theta)
    data = xr.XRaySamples(grid=grid, values=vals, rank=2,
                          geometry_id=rc.geometry.geometry_id())
    igrid = tn.InteriorGrid(rc.geometry, rc.interior)
    fhat, diag = xr.invert_cg(rc.geometry, data, igrid,
                              lam=float(icfg.get("lambda", 0.0)),
                              tol=float(icfg.get("tol", 1e-4)),
                              maxiter=int(icfg.get("maxiter", 60)),
                              n_fiber=rc.n_fiber)
    fhat.to_csv(rc.outpath("recovered.csv"))
    rep = {"iters": diag["iters"], "residual": diag["rel_residual"],
           "l2_error_if_known": None, "lambda": diag["lambda"],
           "discrepancy": diag["discrepancy"], "converged": diag["converged"]}
    out = rc.report({"inversion": rep})
    _write_json(rc.outpath("invert.json"), out)
    print(json.dumps(rep, sort_keys=True))
    return 0 if diag["converged"] else 1


def _suite_flow(rc):
    import numpy as np
    from .flow import time_reversal_check
    from .geometry import make_phase_point
    geom = rc.geometry
    checks = []
    rng = np.random.default_rng(rc.seed)
    worst_rev = 0.0
    worst_ell = 0.0
    worst_drift = 0.0
    n_done = 0
    for _ in range(64):
        if n_done >= 20:
            break
        s = rng.uniform(0, geom.boundary_length)
        th = rng.uniform(-1.2, 1.2)
        pt, _ = geom.phase_from_boundary(s, th)
        try:
            rv = time_reversal_check(geom, pt, t_cap=min(rc.t_cap, 60.0),
                                     tol=1e-11)
        except LensrigError:
            continue
        except ValueError:
            continue
        worst_rev = max(worst_rev, rv.residual)
        worst_ell = max(worst_ell, abs(rv.ell_forward - rv.ell_reversed))
        n_done += 1
    checks.append({"name": "time_reversal_residual", "value": worst_rev,
                   "bound": 1e-7, "passed": worst_rev <= 1e-7})
    checks.append({"name": "time_reversal_length", "value": worst_ell,
                   "bound": 1e-9, "passed": worst_ell <= 1e-9})
    return checks


def _suite_santalo(rc):
    trapping = rc.geometry.chart_kind == "cylinder"
    rep = trap.santalo_compare(rc.geometry,
                               lambda x, y, vx, vy: np.ones_like(x),
                               n_s=8 if trapping else min(rc.n_s, 32),
                               n_theta=128 if trapping else max(rc.n_theta, 64),
                               t_cap=min(rc.t_cap, 60.0), tol=rc.tol,
                               n_interior=128, n_fiber=32)
    bound = 1e-2 if trapping else 1e-3
    return [{"name": "santalo_rel_err", "value": rep.rel_err, "bound": bound,
             "passed": rep.rel_err <= bound}]


def _suite_tensors(rc):
    geom = rc.geometry
    igrid = tn.InteriorGrid(geom, min(rc.interior, 64))
    rng = np.random.default_rng(rc.seed)
    f = tn.SymTensorField(igrid, 2, rng.standard_normal((*igrid.shape, 3))
                          * igrid.mask[:, :, None])
    p, fs = tn.solenoidal_decompose(geom, f)
    recon = tn.l2_norm(tn.sym_derivative(geom, p) + fs - f)
    nf = tn.l2_norm(f)
    divs = tn.l2_norm(tn.divergence(geom, fs))
    orth = abs(tn.l2_inner(tn.sym_derivative(geom, p), fs))
    return [
        {"name": "decomposition_reconstruction", "value": recon,
         "bound": 1e-7 * nf, "passed": recon <= 1e-7 * nf},
        {"name": "decomposition_divergence", "value": divs,
         "bound": 1e-6 * nf, "passed": divs <= 1e-6 * nf},
        {"name": "decomposition_orthogonality", "value": orth,
         "bound": 1e-6 * nf ** 2, "passed": orth <= 1e-6 * nf ** 2},
    ]


def _suite_xray(rc):
    geom = rc.geometry
    grid = xr.boundary_grid(geom, min(rc.n_s, 64), min(rc.n_theta, 32),
                            t_cap=min(rc.t_cap, 60.0), tol=rc.tol)
    igrid = tn.InteriorGrid(geom, 96)
    if geom.chart_kind == "cylinder":
        def pfun(X, Y):
            env = (1 - (X / geom.params[0]) ** 2) ** 3
            return (env * np.sin(Y), env * np.cos(Y + X))
    else:
        R = geom.params[0]
        def pfun(X, Y):
            env = (1 - (X ** 2 + Y ** 2) / R ** 2) ** 3
            return (env * np.sin(X + Y), env * np.cos(X - Y))
    p = tn.field_from_function(igrid, 1, pfun)
    Dp = tn.sym_derivative(geom, p)
    IDp = xr.xray_m(geom, Dp, grid, tol=1e-11)
    kernel = xr.mu_norm(grid, IDp.finite_values()) / tn.l2_norm(Dp)
    # duality on a smooth pair
    def hfun(X, Y):
        if geom.chart_kind == "cylinder":
            env = (1 - (X / geom.params[0]) ** 2) ** 2
        else:
            env = (1 - (X ** 2 + Y ** 2) / geom.params[0] ** 2) ** 2
        return (env * (1 + 0.3 * np.sin(X + Y)), 0.2 * env * np.cos(X),
                env * (1 - 0.2 * X))
    h = tn.field_from_function(igrid, 2, hfun)
    S, T = np.meshgrid(grid.s, grid.theta, indexing="ij")
    wv = np.cos(T) ** 2 * (1 + 0.4 * np.sin(2 * math.pi * S / geom.boundary_length))
    I2h = xr.xray_m(geom, h, grid, tol=rc.tol)
    lhs = xr.mu_inner(grid, I2h.finite_values(), wv)
    wsamp = xr.XRaySamples(grid=grid, values=wv, rank=2,
                           geometry_id=geom.geometry_id())
    adj = xr.xray_adjoint_m(geom, wsamp, igrid, n_fiber=rc.n_fiber)
    rhs = tn.l2_inner(h, adj)
    den = xr.mu_norm(grid, wv) * tn.l2_norm(h)
    dual = abs(lhs - rhs) / den
    return [
        {"name": "kernel_inclusion", "value": kernel, "bound": 1e-5,
         "passed": kernel <= 1e-5},
        {"name": "adjoint_duality", "value": dual, "bound": 1e-2,
         "passed": dual <= 1e-2},
    ]


def _suite_lens(rc):
    geom = rc.geometry
    grid = xr.boundary_grid(geom, min(rc.n_s, 64), min(rc.n_theta, 32),
                            t_cap=min(rc.t_cap, 60.0), tol=rc.tol)
    ds = lens_mod.lens_dataset(geom, grid)
    same = lens_mod.lens_compare(ds, ds)
    L = geom.boundary_length
    rep = lens_mod.scattering_isometry_check(
        geom, lambda s, th: (1 + 0.5 * np.sin(2 * math.pi * s / L))
        * np.cos(th) ** 2, ds)
    return [
        {"name": "lens_self_compare", "value": same.sup_dell, "bound": 0.0,
         "passed": same.sup_dell == 0.0},
        {"name": "scattering_isometry", "value": rep.rel_err, "bound": 1e-2,
         "passed": rep.rel_err <= 1e-2},
    ]


_SUITES = {"flow": _suite_flow, "santalo": _suite_santalo,
           "tensors": _suite_tensors, "xray": _suite_xray,
           "lens": _suite_lens}


def cmd_verify(rc, suite):
    if suite not in list(_SUITES) + ["all"]:
        raise ConfigParse(f"unknown suite {suite!r}; "
                          f"choose from {sorted(_SUITES)} or 'all'")
    names = sorted(_SUITES) if suite == "all" else [suite]
    results = {}
    ok = True
    for name in names:
        checks = _SUITES[name](rc)
        results[name] = checks
        for c in checks:
            ok &= bool(c["passed"])
            print(f"[{'PASS' if c['passed'] else 'FAIL'}] {name}.{c['name']}: "
                  f"{c['value']:.3e} (bound {c['bound']:.3e})")
    out = rc.report({"suites": results, "passed": ok})
    _write_json(rc.outpath("verify.json"), out)
    return 0 if ok else 1


def make_parser():
    p = argparse.ArgumentParser(
        prog="lensrig",
        description="lens-data and tensor-tomography laboratory on 2-D "
                    "manifolds with strictly convex boundary")
    p.add_argument("command",
                   choices=["audit", "lens", "santalo", "escape", "xray",
                            "invert", "verify"])
    p.add_argument("--config", required=True, help="TOML or JSON run config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker pool size (outputs are identical for any "
                        "value; fallback env LENSRIG_JOBS)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--suite", default="all",
                   help="verify: one of flow, santalo, tensors, xray, lens, all")
    p.add_argument("--data", default=None, help="invert: input data CSV")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    jobs = args.jobs if args.jobs is not None else \
        int(os.environ.get("LENSRIG_JOBS", "1"))
    if jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        rc = RunConfig(cfg, out_override=args.out, seed_override=args.seed)
        if args.command == "audit":
            return cmd_audit(rc)
        if args.command == "lens":
            return cmd_lens(rc)
        if args.command == "santalo":
            return cmd_santalo(rc)
        if args.command == "escape":
            return cmd_escape(rc)
        if args.command == "xray":
            return cmd_xray(rc)
        if args.command == "invert":
            return cmd_invert(rc, args.data)
        if args.command == "verify":
            return cmd_verify(rc, args.suite)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except LensrigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
