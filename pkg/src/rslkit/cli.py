"""Command-line front end.

Every subcommand reads its inputs, runs one analysis, and writes CSV files
plus ``manifest.txt`` into ``--out``.  Settings come from flags and from an
INI config file: run keys live in the ``[rslkit]`` section; model banks and
regions use ``[model.NAME]`` and ``[region.NAME]`` sections.

Exit status: 0 on success, 2 on usage errors, 1 on computation errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__, _backend
from . import data as D
from . import gp, igp, reductions, spacetime, statespace, trend, validation
from . import kernels as K
from .errors import RslError

SUBCOMMANDS = (
    "ingest", "fit-linear", "fit-changepoint", "fit-gp", "fit-nigp", "fit-igp", "fit-stgp", "decompose",
    "kalman", "eof", "virtual-station", "synth", "diagnose", "cross-validate",
)
STOCHASTIC = {
    "fit-changepoint", "fit-gp", "fit-nigp", "fit-igp", "fit-stgp", "decompose", "synth", "diagnose",
    "cross-validate",
}
NEEDS_INPUT = set(SUBCOMMANDS) - {"synth"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


class Config:
    """Key-value settings from the ``[rslkit]`` section plus extra sections."""

    def __init__(self, path: str | None):
        self.parser = configparser.ConfigParser(interpolation=None)
        self.parser.optionxform = str
        self.path = path
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise UsageError(f"config file not found: {path}")
            try:
                self.parser.read_string(p.read_text())
            except configparser.Error as e:
                raise UsageError(f"cannot parse config {path}: {e}") from None
        self.values = dict(self.parser["rslkit"]) if self.parser.has_section("rslkit") else {}
        self.used: dict[str, str] = {}

    def get(self, key, default=None, cast=str):
        if key not in self.values:
            return default
        raw = self.values[key]
        self.used[key] = raw
        try:
            return cast(raw)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r}: cannot read {raw!r}") from None

    def floats(self, key, default=()):
        return self.get(key, default, lambda s: tuple(float(x) for x in s.replace(",", " ").split()))

    def file(self, key):
        """A path-valued key, resolved against the config file's directory."""
        v = self.get(key)
        if v is None:
            return None
        v = Path(v)
        return v if v.is_absolute() or self.path is None else Path(self.path).parent / v

    def sections(self, prefix):
        return {s[len(prefix):]: dict(self.parser[s]) for s in self.parser.sections() if s.startswith(prefix)}


def parse_grid(text: str) -> np.ndarray:
    """``start:end:step`` (inclusive of ``end`` when it lies on the grid)."""
    parts = text.replace(",", ":").split(":")
    if len(parts) != 3:
        raise UsageError(f"--grid expects start:end:step, got {text!r}")
    try:
        a, b, h = map(float, parts)
    except ValueError:
        raise UsageError(f"--grid expects numbers, got {text!r}") from None
    if not h > 0:
        raise UsageError("grid step must be positive")
    if b < a:
        raise UsageError("grid end precedes its start")
    n = int(math.floor((b - a) / h + 1e-9)) + 1
    return a + h * np.arange(n)


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_field(path: Path, f: gp.PosteriorField, level: float = 0.95):
    lo, hi = f.interval(level)
    q = f.quantiles
    if q:
        lo, hi = q[2.5], q[97.5]
    write_table(path, ["time", "mean", "sd", "p2.5", "p97.5"], zip(f.t, f.mean, f.sd, lo, hi))


def write_summary(path: Path, summary: dict):
    rows = [(k, v["mean"], v["sd"], v["p2.5"], v["p50"], v["p97.5"]) for k, v in summary.items()]
    write_table(path, ["parameter", "mean", "sd", "p2.5", "p50", "p97.5"], rows)


def write_theta(path: Path, theta: dict, extra=()):
    write_table(path, ["name", "value"], [*sorted(theta.items()), *extra])


# ---------------------------------------------------------------------------
# input helpers


def load_dataset(path) -> D.Dataset:
    return D.load_csv(path)


def load_site(ctx) -> D.Dataset:
    """Dataset for single-site models, restricted to the ``site`` config key when given."""
    d = load_dataset(ctx.input)
    site = ctx.cfg.get("site")
    if site is None:
        return d
    if site not in d.sites:
        raise UsageError(f"site {site!r} not in {ctx.input}")
    return d.subset(np.array([s == site for s in d.site_ids]))


def load_gauges(path, sites_path=None) -> reductions.GaugeSet:
    """Gauge matrix CSV (``time`` column then one column per site) plus coordinates.

    Coordinates come from ``sites_path`` (``site_id,lat,lon``); without it
    every gauge sits at (0, 0).
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0].strip().lower() != "time":
        raise UsageError(f"{path}: gauge matrix must start with a 'time' column")
    ids = tuple(h.strip() for h in rows[0][1:])
    try:
        M = np.array([[float(x) if x.strip() not in ("", "nan", "NA") else np.nan for x in r] for r in rows[1:]])
    except ValueError as e:
        raise D.ParseError(f"{path}: {e}") from None
    lat = np.zeros(len(ids))
    lon = np.zeros(len(ids))
    if sites_path is not None:
        coords = {}
        with open(sites_path, newline="") as fh:
            for r in csv.DictReader(fh):
                coords[r["site_id"].strip()] = (float(r["lat"]), float(r["lon"]))
        for i, s in enumerate(ids):
            if s not in coords:
                raise UsageError(f"no coordinates for gauge {s!r} in {sites_path}")
            lat[i], lon[i] = coords[s]
    return reductions.GaugeSet(M[:, 0], M[:, 1:], ids, lat, lon)


def _read_grid_csv(path):
    """CSV with ``lat,lon`` then value columns; returns coords, names and values."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["lat", "lon"]:
        raise UsageError(f"{path}: expected lat,lon as the first columns")
    A = np.array([[float(x) for x in r] for r in rows[1:]])
    return A[:, 0], A[:, 1], header[2:], A[:, 2:]


def _nearest(lat, lon, glat, glon):
    return np.argmin(_backend.angular_distance(lat, lon, glat, glon), axis=1)


def gp_spec_from_config(cfg: Config) -> gp.GpModelSpec:
    text = cfg.get("kernel")
    mean = cfg.get("mean", "constant")
    if text is None:
        return gp.GpModelSpec.default_et_gp(mean)
    kern = K.parse(text)
    bounds = {}
    for k, v in cfg.values.items():
        if k.startswith("bound."):
            lo, hi = cfg.floats(k)
            bounds[k[len("bound."):]] = (lo, hi)
    return gp.GpModelSpec(kern, bounds, mean)


def mcmc_from_config(cfg: Config, seed: int) -> trend.McmcSettings:
    return trend.McmcSettings(
        n_draws=cfg.get("n_draws", 1500, int), n_burn=cfg.get("n_burn", 1500, int),
        n_chains=cfg.get("n_chains", 2, int), thin=cfg.get("thin", 1, int), seed=seed,
    )


def _data_grid(d: D.Dataset, grid, cfg: Config):
    if grid is not None:
        return grid
    n = cfg.get("grid_points", 101, int)
    return np.linspace(float(d.t.min()), float(d.t.max()), n)


def _rate_window(grid, cfg):
    h = float(grid[1] - grid[0]) if grid.size > 1 else 1.0
    return cfg.get("rate_window", h, float)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(ctx):
    d = load_dataset(ctx.input)
    D.write_csv(d, ctx.out / "dataset.csv")
    write_table(ctx.out / "sites.csv", ["site_id", "lat", "lon", "n"],
                [(s, *ll, sum(1 for x in d.site_ids if x == s)) for s, ll in D.site_table(d).items()])


def cmd_fit_linear(ctx):
    d = load_site(ctx)
    f = trend.fit_linear(d, ctx.cfg.get("method", "OLS").upper())
    write_table(ctx.out / "linear.csv", ["parameter", "estimate", "se"],
                [("slope", f.slope, f.slope_se), ("intercept", f.intercept, f.intercept_se), ("rmse", f.rmse, "")])
    if ctx.grid is not None:
        write_table(ctx.out / "linear_curve.csv", ["time", "mean"], zip(ctx.grid, f.predict(ctx.grid)))


def cmd_fit_changepoint(ctx):
    d = load_site(ctx)
    cfg = ctx.cfg
    pri = trend.ChangePointPriors(rate_sd=cfg.get("rate_sd", 0.05, float),
                                  sigma_scale=cfg.get("sigma_scale", 1.0, float))
    mc = mcmc_from_config(cfg, ctx.seed)
    max_cp = cfg.get("max_cp", None, int)
    if max_cp is not None:
        sel = trend.select_changepoints(d, max_cp, pri, mc)
        write_table(ctx.out / "dic.csv", ["n_cp", "dic"], sorted(sel.table.items()))
        fit = sel.fits[sel.best]
    else:
        fit = trend.fit_changepoint(d, cfg.get("n_cp", 1, int), pri, mc)
    names, cols = fit.draws_table()
    rows = []
    for i, n in enumerate(names):
        c = cols[:, i]
        q = np.percentile(c, [2.5, 50, 97.5])
        rows.append((n, c.mean(), c.std(ddof=1), *q))
    write_table(ctx.out / "changepoint_summary.csv", ["parameter", "mean", "sd", "p2.5", "p50", "p97.5"], rows)
    chain = fit.chain if fit.chain is not None else np.zeros(len(cols), dtype=int)
    write_table(ctx.out / "changepoint_chain.csv", ["chain", *names], ([int(c), *r] for c, r in zip(chain, cols)))
    write_table(ctx.out / "changepoint_fit.csv", ["key", "value"],
                [("n_cp", fit.n_cp), ("dic", fit.dic), ("p_d", fit.p_d), ("empty_segment", int(fit.empty_segment))])
    grid = _data_grid(d, ctx.grid, cfg)
    p = fit.predict(grid)
    write_table(ctx.out / "level.csv", ["time", "mean", "sd", "p2.5", "p97.5"],
                zip(grid, p["mean"], p["sd"], p["p2.5"], p["p97.5"]))


def _gp_outputs(ctx, model, d):
    grid = _data_grid(d, ctx.grid, ctx.cfg)
    lev = gp.predict(model, grid)
    write_field(ctx.out / "level.csv", lev)
    if grid.size >= 2:
        write_field(ctx.out / "rate.csv", gp.rate_transform(lev, _rate_window(grid, ctx.cfg)))
    write_theta(ctx.out / "hyperparameters.csv", model.theta, [("log_likelihood", model.log_likelihood)])


def cmd_fit_gp(ctx):
    d = load_site(ctx)
    m = gp.fit_et_gp(d, gp_spec_from_config(ctx.cfg), restarts=ctx.cfg.get("restarts", 4, int), seed=ctx.seed)
    _gp_outputs(ctx, m, d)


def cmd_fit_nigp(ctx):
    d = load_site(ctx)
    m = gp.fit_nigp(d, gp_spec_from_config(ctx.cfg), restarts=ctx.cfg.get("restarts", 4, int),
                    max_iters=ctx.cfg.get("max_iters", 10, int), seed=ctx.seed)
    _gp_outputs(ctx, m, d)
    write_table(ctx.out / "inflation.csv", ["time", "inflation_var"], zip(d.t, m.inflation))


def cmd_fit_igp(ctx):
    d = load_site(ctx)
    cfg = ctx.cfg
    base = igp.IgpSpec()
    k = base.rate_kernel
    spec = igp.IgpSpec(
        rate_kernel=K.PoweredExponential(s2=k.s2, rho=k.rho, kappa=cfg.get("kappa", 2.0, float),
                                         unit=cfg.get("rho_unit", 100.0, float), name="rate"),
        t0=cfg.get("t0", None, float),
    )
    grid = _data_grid(d, ctx.grid, cfg)
    fit = igp.fit_eiv_igp(d, spec, mcmc_from_config(cfg, ctx.seed), grid)
    write_field(ctx.out / "level.csv", fit.level)
    write_field(ctx.out / "rate.csv", fit.rate)
    write_summary(ctx.out / "hyperparameters.csv", fit.chain.summary())
    fit.chain.to_csv(ctx.out / "chain.csv")


def _st_spec(ctx):
    return spacetime.StGpSpec.default(t_ref=ctx.cfg.get("t_ref", 2000.0, float),
                                      max_n=ctx.cfg.get("max_n", spacetime.DEFAULT_MAX_N, int))


def _st_fit(ctx, d):
    return spacetime.fit_est_gp(d, _st_spec(ctx), restarts=ctx.cfg.get("restarts", 2, int), seed=ctx.seed)


def _site_grid(d, times):
    st = D.site_table(d)
    names = list(st)
    return names, spacetime.field_grid([st[s][0] for s in names], [st[s][1] for s in names], times)


def cmd_fit_stgp(ctx):
    d = load_dataset(ctx.input)
    m = _st_fit(ctx, d)
    times = _data_grid(d, ctx.grid, ctx.cfg)
    names, G = _site_grid(d, times)
    f = spacetime.predict_field(m, G)
    lo, hi = f.interval()
    nt = times.size
    rows = ((names[i // nt], t, mu, s, a, b) for i, (t, mu, s, a, b) in enumerate(zip(f.t, f.mean, f.sd, lo, hi)))
    write_table(ctx.out / "site_curves.csv", ["site_id", "time", "mean", "sd", "p2.5", "p97.5"], rows)
    res = ctx.cfg.get("resolution", None, float)
    if res is not None:
        box = ctx.cfg.floats("box", ())
        if box:
            la0, la1, lo0, lo1 = box
            lat = np.arange(la0, la1 + 1e-9, res)
            lon = np.arange(lo0, lo1 + 1e-9, res)
            LA, LO = np.meshgrid(lat, lon, indexing="ij")
            Gm = spacetime.field_grid(LA.ravel(), LO.ravel(), times)
        else:
            Gm = spacetime.map_grid(d, times, res)
        fm = spacetime.predict_field(m, Gm)
        write_table(ctx.out / "field.csv", ["lat", "lon", "time", "mean", "sd"],
                    zip(Gm.lat, Gm.lon, Gm.t, fm.mean, fm.sd))
    write_theta(ctx.out / "hyperparameters.csv", m.theta, [("log_likelihood", m.log_likelihood)])


def cmd_decompose(ctx):
    d = load_dataset(ctx.input)
    m = _st_fit(ctx, d)
    times = _data_grid(d, ctx.grid, ctx.cfg)
    names, G = _site_grid(d, times)
    nt = times.size
    for comp, f in spacetime.decompose(m, G).items():
        rows = ((names[i // nt], t, mu, s) for i, (t, mu, s) in enumerate(zip(f.t, f.mean, f.sd)))
        write_table(ctx.out / f"component_{comp}.csv", ["site_id", "time", "mean", "sd"], rows)
    write_theta(ctx.out / "hyperparameters.csv", m.theta, [("log_likelihood", m.log_likelihood)])


def _bank_model(name, sec, gauges, n_steps, base: Path):
    def path(key):
        v = sec.get(key)
        return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

    fp = path("fingerprints")
    if fp is None:
        raise UsageError(f"model {name}: missing 'fingerprints'")
    flat, flon, sources, W = _read_grid_csv(fp)
    F = W[_nearest(gauges.lat, gauges.lon, flat, flon)]
    gia = None
    if path("gia") is not None:
        glat, glon, _, G = _read_grid_csv(path("gia"))
        gia = G[_nearest(gauges.lat, gauges.lon, glat, glon), 0]
    dsl = None
    if path("dsl") is not None:
        dsl = load_gauges(path("dsl")).levels
    try:
        q_local, q_rate, r = (float(sec.get(k, dv)) for k, dv in (("q_local", 1e-6), ("q_rate", 1e-8), ("r", 1e-4)))
        dt = float(sec.get("dt", 1.0))
    except ValueError:
        raise UsageError(f"model {name}: non-numeric noise setting") from None
    return statespace.fingerprint_model(F, dt, q_local, q_rate, r, gia, dsl, sites=gauges.site_ids,
                                        sources=sources, n_steps=n_steps, name=name)


def cmd_kalman(ctx):
    g = load_gauges(ctx.input, ctx.cfg.file("sites"))
    bank = ctx.cfg.sections("model.")
    if not bank:
        raise UsageError("kalman needs at least one [model.NAME] section in the config")
    base = Path(ctx.cfg.path).parent if ctx.cfg.path else Path.cwd()
    Z = g.levels - np.nanmean(g.levels[:1], axis=0, keepdims=True) if ctx.cfg.get("anchor", 0, int) else g.levels
    models = [_bank_model(n, s, g, Z.shape[0], base) for n, s in sorted(bank.items())]
    res = statespace.multi_model_smooth(models, Z)
    rows = []
    for j, s in enumerate(g.site_ids):
        for k, t in enumerate(g.times):
            rows.append((s, t, res.mean[k, j], res.sd[k, j]))
    write_table(ctx.out / "smoothed.csv", ["site_id", "time", "mean", "sd"], rows)
    gm = res.gmsl()
    write_table(ctx.out / "gmsl.csv", ["time", "mean", "sd"], zip(g.times, gm.mean, gm.sd))
    write_table(ctx.out / "weights.csv", ["model", "loglik", "weight"],
                zip([m.name for m in models], res.loglik, res.weights))


def cmd_eof(ctx):
    cfg = ctx.cfg
    fpath = cfg.file("field")
    if fpath is None:
        raise UsageError("eof needs a 'field' key (CSV lat,lon,<times>)")
    lat, lon, _, A = _read_grid_csv(fpath)
    basis = reductions.eof_decompose(A, cfg.get("k", 1, int), lat, lon)
    g = load_gauges(ctx.input, cfg.file("sites"))
    gia = None
    if cfg.file("gia") is not None:
        glat, glon, _, G = _read_grid_csv(cfg.file("gia"))
        gia = G[_nearest(lat, lon, glat, glon), 0]
    fit = reductions.eof_regress(basis, g.levels, np.column_stack([g.lat, g.lon]), gia)
    write_table(ctx.out / "eof_patterns.csv", ["lat", "lon", *[f"eof{i + 1}" for i in range(basis.k)]],
                (np.r_[a, b, u] for a, b, u in zip(lat, lon, basis.patterns)))
    write_table(ctx.out / "eof_variance.csv", ["eof", "fraction"], enumerate(basis.fractions, 1))
    write_table(ctx.out / "eof_fit.csv", ["time", "g", *[f"alpha{i + 1}" for i in range(basis.k)]],
                (np.r_[t, gg, a] for t, gg, a in zip(g.times, fit.g, fit.alpha)))
    write_table(ctx.out / "eof_field.csv", ["lat", "lon", "time", "value"],
                ((lat[i], lon[i], t, fit.field[i, j]) for i in range(lat.size) for j, t in enumerate(g.times)))


def _regions(cfg: Config):
    out = []
    for name, sec in sorted(cfg.sections("region.").items()):
        try:
            w = float(sec["weight"])
        except (KeyError, ValueError):
            raise UsageError(f"region {name}: needs a numeric 'weight'") from None
        if "sites" in sec:
            out.append(reductions.Region(name, w, sites=tuple(s.strip() for s in sec["sites"].split(",") if s.strip())))
        elif "polygon" in sec:
            verts = tuple(tuple(float(x) for x in v.split()) for v in sec["polygon"].split(";") if v.strip())
            out.append(reductions.Region(name, w, polygon=verts))
        else:
            raise UsageError(f"region {name}: give 'sites' or 'polygon'")
    if not out:
        raise UsageError("virtual-station needs [region.NAME] sections in the config")
    return out


def cmd_virtual_station(ctx):
    g = load_gauges(ctx.input, ctx.cfg.file("sites"))
    res = reductions.virtual_station_gmsl(g, _regions(ctx.cfg))
    write_table(ctx.out / "gmsl.csv", ["time", "gmsl"], zip(res.times, res.gmsl))
    names = list(res.regional)
    write_table(ctx.out / "regional.csv", ["time", *names],
                (np.r_[t, [res.regional[n][k] for n in names]] for k, t in enumerate(res.times)))
    write_table(ctx.out / "stations.csv", ["region", "lat", "lon", "members"],
                ((n, *res.stations[n]) for n in names))


def _synth_spec(cfg: Config, seed: int) -> validation.SyntheticTruth:
    sites = []
    for item in cfg.get("sites", "S:0:0").split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise UsageError("sites entries look like ID:lat:lon")
        sites.append(validation.Site(parts[0], float(parts[1]), float(parts[2])))
    comps = {}
    if cfg.get("kernel") is not None:
        comps["gp"] = K.parse(cfg.get("kernel"))
    return validation.SyntheticTruth(
        t_range=tuple(cfg.floats("t_range", (-10000.0, 2000.0))), sites=tuple(sites),
        slope=cfg.get("slope", 0.0, float), intercept=cfg.get("intercept", 0.0, float),
        change_points=cfg.floats("change_points", ()), rates=cfg.floats("rates", ()),
        gp_components=comps, seed=seed,
    )


def cmd_synth(ctx):
    cfg = ctx.cfg
    spec = _synth_spec(cfg, ctx.seed)
    d, h = validation.generate(spec, cfg.get("n_obs", 100, int), cfg.get("rsl_sd", 0.0, float),
                               cfg.get("age_sd", 0.0, float), cfg.get("kind", "SLIP"))
    D.write_csv(d, ctx.out / "synthetic.csv")
    write_table(ctx.out / "truth.csv", ["site_id", "t_true", "rsl_true"], zip(d.site_ids, h.t_true, h.f_true))
    if ctx.grid is not None:
        rows = []
        for s in spec.sites:
            for t, f in zip(ctx.grid, h.truth(ctx.grid, s.lat, s.lon)):
                rows.append((s.site_id, t, f))
        write_table(ctx.out / "truth_curve.csv", ["site_id", "time", "rsl"], rows)


def cmd_diagnose(ctx):
    d = load_site(ctx)
    m = gp.fit_et_gp(d, gp_spec_from_config(ctx.cfg), restarts=ctx.cfg.get("restarts", 4, int), seed=ctx.seed)
    mu, var = gp.predictive_at_data(m)
    diag = validation.residual_diagnostics(mu, d)
    write_table(ctx.out / "residuals.csv", ["t", "predicted", "observed", "residual"],
                zip(diag.t, diag.predicted, diag.observed, diag.residuals))
    write_table(ctx.out / "acf.csv", ["lag", "value", "band"], ((k, v, diag.band) for k, v in diag.acf.items()))
    cov = validation.coverage(mu, np.sqrt(var), d)
    rmse = float(np.sqrt(np.mean(diag.residuals**2)))
    with open(ctx.out / "summary.txt", "w") as fh:
        for k, v in (("n", len(d)), ("coverage95", cov), ("rmse", rmse), ("acf_exceed_fraction", diag.exceed_fraction),
                     ("independence_flag", int(diag.flag)), ("log_likelihood", m.log_likelihood)):
            fh.write(f"{k}: {_fmt(v)}\n")


def cmd_cross_validate(ctx):
    d = load_dataset(ctx.input)
    fam = validation.est_gp_family(_st_spec(ctx), restarts=ctx.cfg.get("restarts", 2, int), seed=ctx.seed)
    wanted = ctx.cfg.get("holdout")
    sites = [s.strip() for s in wanted.split(",")] if wanted else d.sites
    rows = []
    for s in sites:
        r = validation.leave_site_out(fam, d, s)
        rows.append((s, r.n, r.coverage, r.rmse))
    write_table(ctx.out / "cross_validation.csv", ["site_id", "n", "coverage95", "rmse"], rows)


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-linear": cmd_fit_linear,
    "fit-changepoint": cmd_fit_changepoint,
    "fit-gp": cmd_fit_gp,
    "fit-nigp": cmd_fit_nigp,
    "fit-igp": cmd_fit_igp,
    "fit-stgp": cmd_fit_stgp,
    "decompose": cmd_decompose,
    "kalman": cmd_kalman,
    "eof": cmd_eof,
    "virtual-station": cmd_virtual_station,
    "synth": cmd_synth,
    "diagnose": cmd_diagnose,
    "cross-validate": cmd_cross_validate,
}


# ---------------------------------------------------------------------------
# driver


class _Context:
    def __init__(self, args, cfg, grid, seed):
        self.input = args.input
        self.cfg = cfg
        self.grid = grid
        self.seed = seed
        self.out = Path(args.out)
        self.stages: list[tuple[str, float]] = []

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.stages.append((name, time.perf_counter() - t0))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rslkit", description="Statistical analysis of relative sea-level records.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--input", help="input CSV (RSL compilation or gauge matrix)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--grid", help="prediction times as start:end:step")
    p.add_argument("--seed", type=int, help="random seed (required for stochastic subcommands)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")
    return p


def _manifest(ctx, args, argv, total):
    lines = [
        f"subcommand = {args.subcommand}",
        f"argv = {' '.join(argv)}",
        f"input = {args.input}",
        f"config = {args.config}",
        f"seed = {ctx.seed}",
        f"grid = {args.grid}",
        f"threads = {args.threads}",
        f"rslkit = {__version__}",
        f"backend = {_backend.BACKEND}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"python = {platform.python_version()}",
    ]
    lines += [f"config.{k} = {v}" for k, v in sorted(ctx.cfg.values.items())]
    lines += [f"time.{name} = {sec:.3f}" for name, sec in ctx.stages]
    lines.append(f"time.total = {total:.3f}")
    (ctx.out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _join_grid(argv):
    # grids usually start at negative years, which argparse would read as a flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--grid" and i + 1 < len(argv):
            out.append(f"--grid={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_join_grid(argv))
        cfg = Config(args.config)
        grid = parse_grid(args.grid) if args.grid else None
        seed = args.seed if args.seed is not None else cfg.get("seed", None, int)
        if args.subcommand in STOCHASTIC and seed is None:
            raise UsageError(f"{args.subcommand} is stochastic: pass --seed or set 'seed' in the config")
        if args.subcommand in NEEDS_INPUT and not args.input:
            raise UsageError(f"{args.subcommand} needs --input")
        if args.input and not Path(args.input).is_file():
            raise UsageError(f"input file not found: {args.input}")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UsageError(f"cannot create output directory {out}: {e}") from None
    except UsageError as e:
        print(f"rslkit: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)

    ctx = _Context(args, cfg, grid, seed)
    t0 = time.perf_counter()
    try:
        limits = None
        if args.threads:
            # OpenBLAS sizes its buffers at load time; asking for more threads than it started with crashes
            current = max((p["num_threads"] for p in threadpool_info()), default=args.threads)
            limits = threadpool_limits(min(args.threads, current))
        try:
            with ctx.stage(args.subcommand):
                COMMANDS[args.subcommand](ctx)
        finally:
            if limits is not None:
                limits.restore_original_limits()
    except UsageError as e:
        print(f"rslkit: error: {e}", file=sys.stderr)
        return 2
    except (RslError, ValueError, np.linalg.LinAlgError, OSError) as e:
        print(f"rslkit: {args.subcommand} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _manifest(ctx, args, argv, time.perf_counter() - t0)
    return 0


def main():
    sys.exit(run())


__all__ = ["run", "main", "build_parser", "parse_grid", "Config", "SUBCOMMANDS"]


if __name__ == "__main__":
    main()
