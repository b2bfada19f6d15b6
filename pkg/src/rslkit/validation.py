"""Synthetic truths, residual diagnostics, coverage and cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import linalg
from scipy.stats import norm

from . import gp
from . import kernels as K
from .data import Dataset, Kind, Observation
from .errors import ConfigurationError, DegeneracyError, InsufficientDataError
from .kernels import Kernel, Points

MAX_LAG = 40


# ---------------------------------------------------------------------------
# synthetic truths


@dataclass(frozen=True)
class Site:
    site_id: str
    lat: float = 0.0
    lon: float = 0.0


@dataclass(frozen=True)
class SyntheticTruth:
    """Recipe for a random but reproducible RSL history.

    The truth is the sum of a linear trend, an optional continuous
    piecewise-linear term, and zero-mean GP components.  Each GP component is
    drawn on ``n_anchor`` anchor times per site over ``t_range`` and
    interpolated by its conditional mean, so the evaluator is a fixed,
    smooth function of (site location, time) once the seed is chosen.

    ``rates`` has one more entry than ``change_points``; the piecewise term is
    zero at ``t_range[0]``.
    """

    t_range: tuple = (-10000.0, 2000.0)
    sites: tuple = (Site("S"),)
    slope: float = 0.0
    intercept: float = 0.0
    t_ref: float = 2000.0
    change_points: tuple = ()
    rates: tuple = ()
    gp_components: Mapping[str, Kernel] = field(default_factory=dict)
    n_anchor: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.t_range[0] < self.t_range[1]:
            raise ConfigurationError("t_range must be increasing")
        if not self.sites:
            raise ConfigurationError("need at least one site")
        if self.rates and len(self.rates) != len(self.change_points) + 1:
            raise ConfigurationError("rates needs one more entry than change_points")
        if self.change_points and not self.rates:
            raise ConfigurationError("change points need segment rates")
        if list(self.change_points) != sorted(self.change_points):
            raise ConfigurationError("change points must be increasing")


class Truth:
    """Deterministic evaluator for a :class:`SyntheticTruth`."""

    def __init__(self, spec: SyntheticTruth):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        lo, hi = spec.t_range
        ts = np.linspace(lo, hi, spec.n_anchor)
        ns = len(spec.sites)
        self._anchor = Points(
            np.tile(ts, ns),
            np.repeat([s.lat for s in spec.sites], ts.size),
            np.repeat([s.lon for s in spec.sites], ts.size),
        )
        self._times = Points(ts)
        self._gp = {}
        for name in sorted(spec.gp_components):
            k = spec.gp_components[name]
            C = k.gram(self._anchor if _spatial(k) else self._times)
            L, _ = K.cholesky(C)
            f = L @ rng.standard_normal(C.shape[0])
            w = linalg.cho_solve((L, True), f)
            self._gp[name] = (k, w)

    def _points(self, t, lat=None, lon=None) -> Points:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if lat is None:
            s = self.spec.sites[0]
            lat, lon = s.lat, s.lon
        return Points(t, np.broadcast_to(lat, t.shape), np.broadcast_to(lon, t.shape))

    def component(self, name: str, t, lat=None, lon=None) -> np.ndarray:
        X = self._points(t, lat, lon)
        if name == "trend":
            return self.spec.intercept + self.spec.slope * (X.t - self.spec.t_ref)
        if name == "changepoint":
            return _piecewise(X.t, self.spec.t_range[0], self.spec.change_points, self.spec.rates)
        if name not in self._gp:
            raise ConfigurationError(f"unknown truth component {name!r}")
        k, w = self._gp[name]
        if _spatial(k):
            return k.cov(X, self._anchor) @ w
        return k.cov(Points(X.t), self._times) @ w

    @property
    def components(self) -> list[str]:
        out = ["trend"]
        if self.spec.rates:
            out.append("changepoint")
        return out + sorted(self._gp)

    def __call__(self, t, lat=None, lon=None) -> np.ndarray:
        return sum(self.component(c, t, lat, lon) for c in self.components)

    def rate(self, t, lat=None, lon=None, h: float = 1.0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (self(t + h, lat, lon) - self(t - h, lat, lon)) / (2.0 * h)


def _spatial(k: Kernel) -> bool:
    return any(isinstance(p, (K.SeparableSpaceTime, K.SiteWeights)) for p in _walk(k))


def _walk(k: Kernel):
    yield k
    for c in k.children():
        yield from _walk(c)


def _piecewise(t, t_start, cps, rates):
    if not rates:
        return np.zeros_like(t)
    knots = np.concatenate([[t_start], cps])
    out = np.zeros_like(t)
    for j, r in enumerate(rates):
        a = knots[j]
        b = knots[j + 1] if j + 1 < knots.size else np.inf
        out += r * (np.clip(t, a, b) - a)
    return out


@dataclass
class TruthHandle:
    truth: Truth
    t_true: np.ndarray
    f_true: np.ndarray


def generate(spec: SyntheticTruth, n_obs: int, rsl_sd: float = 0.0, age_sd: float = 0.0,
             kinds=Kind.SLIP, seed: int | None = None, t_obs_range: tuple | None = None):
    """Draw a dataset from a synthetic truth.

    Observations are spread round-robin over the truth's sites with true ages
    uniform on ``t_obs_range`` (default: the truth's range).  Recorded ages
    and RSL values get independent Gaussian errors.

    Returns
    -------
    (Dataset, TruthHandle)
    """
    if n_obs < 1:
        raise ConfigurationError("n_obs must be at least 1")
    truth = Truth(spec)
    rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    lo, hi = t_obs_range or spec.t_range
    ns = len(spec.sites)
    site_idx = np.arange(n_obs) % ns
    t_true = rng.uniform(lo, hi, n_obs)
    lat = np.array([spec.sites[i].lat for i in site_idx])
    lon = np.array([spec.sites[i].lon for i in site_idx])
    f = truth(t_true, lat, lon)
    rsl_sd = np.broadcast_to(np.asarray(rsl_sd, dtype=float), (n_obs,))
    age_sd = np.broadcast_to(np.asarray(age_sd, dtype=float), (n_obs,))
    y = f + rsl_sd * rng.standard_normal(n_obs)
    t_rec = t_true + age_sd * rng.standard_normal(n_obs)
    kinds = [Kind.parse(kinds)] * n_obs if isinstance(kinds, (str, Kind)) else [Kind.parse(k) for k in kinds]
    order = np.lexsort((t_rec, site_idx))
    obs = tuple(
        Observation(spec.sites[site_idx[i]].site_id, float(lat[i]), float(lon[i]), float(t_rec[i]),
                    0.0 if kinds[i] is Kind.TIDE_GAUGE else float(age_sd[i]), float(y[i]), float(rsl_sd[i]),
                    kinds[i])
        for i in order
    )
    return Dataset(obs, provenance=f"synthetic seed={spec.seed}"), TruthHandle(truth, t_true[order], f[order])


# ---------------------------------------------------------------------------
# residual diagnostics


def acf(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags 0..max_lag (biased, lag-0 normalised)."""
    x = np.asarray(x, dtype=float)
    r = x - x.mean()
    c0 = float(r @ r)
    if not c0 > 0:
        raise DegeneracyError("residuals have zero variance; autocorrelation is undefined")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = float(r[:-k] @ r[k:]) / c0
    return out


@dataclass
class Diagnostics:
    residuals: np.ndarray
    acf: dict
    band: float
    exceed_fraction: float
    flag: bool
    t: np.ndarray
    predicted: np.ndarray
    observed: np.ndarray


def residual_diagnostics(predicted, d: Dataset, max_lag: int = MAX_LAG, threshold: float = 0.05) -> Diagnostics:
    """Residuals in time order and their ACF against the ±1.96/√n band.

    ``flag`` is raised when more than ``threshold`` of lags 1..min(40, n/4)
    fall outside the band.  Irregular spacing is treated as unit lags.
    """
    pred = np.asarray(predicted, dtype=float)
    y = np.asarray(d.y, dtype=float)
    if pred.shape != y.shape:
        raise ConfigurationError("predictions must align with the observations")
    n = y.size
    if n < 8:
        raise InsufficientDataError(f"residual diagnostics need at least 8 observations, got {n}")
    order = np.argsort(np.asarray(d.t), kind="stable")
    res = (y - pred)[order]
    L = min(max_lag, n // 4)
    rho = acf(res, L)
    band = 1.96 / math.sqrt(n)
    exceed = float(np.mean(np.abs(rho[1:]) > band)) if L > 0 else 0.0
    return Diagnostics(res, {k: float(rho[k]) for k in range(L + 1)}, band, exceed, exceed > threshold,
                       np.asarray(d.t)[order], pred[order], y[order])


# ---------------------------------------------------------------------------
# coverage


def coverage(pred_mean, pred_sd, d: Dataset | np.ndarray, level: float = 0.95) -> float:
    """Fraction of observed RSL values inside the central predictive interval.

    ``pred_sd`` must already include observation noise.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError("level must lie in (0, 1)")
    y = np.asarray(d.y if isinstance(d, Dataset) else d, dtype=float)
    m = np.asarray(pred_mean, dtype=float)
    s = np.asarray(pred_sd, dtype=float)
    z = norm.ppf(0.5 + level / 2.0)
    with np.errstate(invalid="ignore"):
        inside = np.abs(y - m) <= z * s
    return float(np.mean(inside))


def model_coverage(model: gp.GpModel, level: float = 0.95) -> float:
    """In-sample coverage of a fitted GP (posterior + all noise terms)."""
    mu, var = gp.predictive_at_data(model)
    return coverage(mu, np.sqrt(var), model.y, level)


# ---------------------------------------------------------------------------
# leave-site-out


@dataclass
class ModelFamily:
    """How to fit a model and predict new observations from it.

    ``predictive(model, d)`` returns the mean and variance of new
    observations at the points of ``d``, including their noise.
    """

    fit: Callable[[Dataset], object]
    predictive: Callable[[object, Dataset], tuple]
    name: str = ""


def est_gp_family(spec=None, restarts: int = 2, seed: int = 0, maxiter: int | None = None) -> ModelFamily:
    from . import spacetime

    def fit(d):
        return spacetime.fit_est_gp(d, spec, restarts=restarts, seed=seed, maxiter=maxiter)

    def predictive(model, d):
        m = model.model
        X = Points.from_dataset(d)
        f = gp.predict(m, X, full_cov=False)
        var = np.diag(f.cov) + m.white_var(X) + np.asarray(d.y_sd) ** 2
        tsd = np.asarray(d.t_sd)
        if np.any(tsd > 0):
            h = max(float(np.ptp(m.X.t)) / 1000.0, 1e-6)
            var = var + tsd**2 * m.slope_at(X, h) ** 2
        return f.mean, var

    return ModelFamily(fit, predictive, "est-gp")


@dataclass
class HoldOut:
    site: str
    coverage: float
    rmse: float
    n: int
    mean: np.ndarray
    sd: np.ndarray
    model: object = None


def leave_site_out(family: ModelFamily, d: Dataset, site: str, level: float = 0.95) -> HoldOut:
    """Refit without ``site`` and score predictions at its observations."""
    if len(d.sites) < 3:
        raise InsufficientDataError("leave-site-out needs at least three sites")
    if site not in d.sites:
        raise ConfigurationError(f"site {site!r} is not in the dataset")
    train = d.without_site(site)
    test = d.subset(np.asarray(d.site_ids) == site)
    model = family.fit(train)
    mu, var = family.predictive(model, test)
    sd = np.sqrt(var)
    y = np.asarray(test.y)
    return HoldOut(site, coverage(mu, sd, test, level), float(np.sqrt(np.mean((y - mu) ** 2))), len(test),
                   mu, sd, model)


__all__ = [
    "Site",
    "SyntheticTruth",
    "Truth",
    "TruthHandle",
    "generate",
    "acf",
    "Diagnostics",
    "residual_diagnostics",
    "coverage",
    "model_coverage",
    "ModelFamily",
    "est_gp_family",
    "HoldOut",
    "leave_site_out",
]
