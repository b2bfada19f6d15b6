"""Empirical-Bayes Gaussian-process regression on RSL data.

The conditioning core works on generic :class:`~rslkit.kernels.Points`, so
the spatio-temporal module reuses it unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from . import kernels as K
from .data import Dataset
from .engines import BoundedParam, maximize
from .errors import ConfigurationError, NumericError
from .kernels import Kernel, Points

_LOG2PI = math.log(2.0 * math.pi)

MEANS = ("zero", "constant", "linear")

# optimiser tolerances in log-parameter and log-likelihood units
XATOL = 1e-3
FATOL = 1e-4


# ---------------------------------------------------------------------------
# fields


@dataclass
class PosteriorField:
    """Joint Gaussian posterior over a set of grid points."""

    grid: Points
    mean: np.ndarray
    cov: np.ndarray
    kind: str = "level"
    label: str = ""
    quantiles: dict = field(default_factory=dict)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    def interval(self, level: float = 0.95):
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2.0)
        return self.mean - z * self.sd, self.mean + z * self.sd

    def draws(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L, _ = K.cholesky(0.5 * (self.cov + self.cov.T))
        return self.mean + (L @ rng.standard_normal((self.mean.size, n))).T

    def __add__(self, other: "PosteriorField") -> "PosteriorField":
        return PosteriorField(self.grid, self.mean + other.mean, self.cov + other.cov, self.kind, self.label)


# ---------------------------------------------------------------------------
# model spec


@dataclass(frozen=True)
class GpModelSpec:
    """Mean choice, kernel and hyperparameter bounds.

    ``bounds`` maps dotted hyperparameter names to ``(lower, upper)``; all
    bounded parameters are searched in log space.  Parameters without bounds,
    and those whose bounds coincide, stay fixed at the kernel's value.
    """

    kernel: Kernel
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    mean: str = "constant"

    def __post_init__(self):
        if self.mean not in MEANS:
            raise ConfigurationError(f"mean must be one of {MEANS}")
        names = self.kernel.hyperparameters()
        for k, (lo, hi) in self.bounds.items():
            if k not in names:
                raise ConfigurationError(f"bound given for unknown hyperparameter {k!r}")
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo <= 0:
                raise ConfigurationError(f"bad bounds for {k}: ({lo}, {hi})")
        self.kernel.check()

    def free_params(self) -> list[BoundedParam]:
        cur = self.kernel.hyperparameters()
        out = []
        for k, (lo, hi) in self.bounds.items():
            if lo == hi:
                continue
            init = cur[k] if lo <= cur[k] <= hi else None
            out.append(BoundedParam(k, lo, hi, "log", init))
        return out

    def pinned(self) -> dict:
        return {k: lo for k, (lo, hi) in self.bounds.items() if lo == hi}

    def kernel_at(self, theta: Mapping[str, float]) -> Kernel:
        vals = dict(self.pinned())
        vals.update(theta)
        return self.kernel.with_values(vals)

    def with_initial(self, theta: Mapping[str, float]) -> "GpModelSpec":
        return replace(self, kernel=self.kernel_at(theta))

    @classmethod
    def default_et_gp(cls, mean: str = "constant") -> "GpModelSpec":
        """Low- and medium-frequency Matérn(3/2) terms plus white noise.

        Amplitude bounds (1e-3, 100) m and white-noise bounds (1e-4, 1) m are
        stored as variances.
        """
        kern = K.Sum((
            K.Matern(s2=1.0, l=5000.0, nu=1.5, name="low"),
            K.Matern(s2=0.01, l=300.0, nu=1.5, name="med"),
            K.WhiteNoise(s2=1e-4, name="white"),
        ))
        bounds = {
            "low.s2": (1e-6, 1e4),
            "low.l": (1e3, 3e4),
            "med.s2": (1e-6, 1e4),
            "med.l": (50.0, 1e3),
            "white.s2": (1e-8, 1.0),
        }
        return cls(kern, bounds, mean)


# ---------------------------------------------------------------------------
# conditioning core


def _mean_coefs(kind: str, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "zero":
        return np.zeros(2)
    if kind == "constant":
        return np.array([float(np.mean(y)), 0.0])
    X = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def _mean_at(coef, t):
    return coef[0] + coef[1] * np.asarray(t, dtype=float)


class Conditioner:
    """Factorised training covariance for one kernel and noise vector."""

    def __init__(self, kernel: Kernel, X: Points, resid: np.ndarray, noise_var: np.ndarray):
        self.kernel = kernel
        self.X = X
        self.resid = np.asarray(resid, dtype=float)
        self.noise_var = np.asarray(noise_var, dtype=float)
        Kdd = kernel.gram(X)
        Kdd[np.diag_indices_from(Kdd)] += self.noise_var
        self.L, self.jitter = K.cholesky(Kdd)
        self.alpha = linalg.cho_solve((self.L, True), self.resid, check_finite=False)

    def lml(self) -> float:
        n = self.resid.size
        return float(-0.5 * self.resid @ self.alpha - np.log(np.diag(self.L)).sum() - 0.5 * n * _LOG2PI)

    def mean(self, kpred: Kernel, Xg: Points) -> np.ndarray:
        return kpred.cov(Xg, self.X) @ self.alpha

    def field(self, kpred: Kernel, Xg: Points, full_cov: bool = True):
        Kgd = kpred.cov(Xg, self.X)
        m = Kgd @ self.alpha
        V = linalg.solve_triangular(self.L, Kgd.T, lower=True, check_finite=False)
        if full_cov:
            C = kpred.gram(Xg) - V.T @ V
            C = 0.5 * (C + C.T)
        else:
            C = np.diag(kpred.diag(Xg) - np.einsum("ij,ij->j", V, V))
        return m, C

    def slope(self, kpred: Kernel, Xg: Points, h: float | None = None) -> np.ndarray:
        """Time derivative of the posterior mean at ``Xg``."""
        d = kpred.d_dt1(Xg, self.X)
        if d is not None:
            return d @ self.alpha
        if h is None or not h > 0:
            raise ConfigurationError("numeric slope needs a positive step")
        up = Xg.with_times(Xg.t + h)
        dn = Xg.with_times(Xg.t - h)
        return (self.mean(kpred, up) - self.mean(kpred, dn)) / (2.0 * h)


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class GpModel:
    spec: GpModelSpec
    theta: dict
    kernel: Kernel
    X: Points
    y: np.ndarray
    obs_var: np.ndarray
    inflation: np.ndarray
    mean_coef: np.ndarray
    cond: Conditioner
    log_likelihood: float
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def noise_var(self) -> np.ndarray:
        return self.obs_var + self.inflation

    @property
    def latent_kernel(self) -> Kernel:
        return self.kernel.without_white()

    def white_var(self, X: Points) -> np.ndarray:
        """Prior variance of the white-noise terms at ``X``."""
        return self.kernel.diag(X) - self.latent_kernel.diag(X)

    def prior_mean(self, X: Points) -> np.ndarray:
        return _mean_at(self.mean_coef, X.t)

    def slope_at(self, X: Points, h: float | None = None) -> np.ndarray:
        return self.cond.slope(self.latent_kernel, X, h) + self.mean_coef[1]


def _as_points(grid) -> Points:
    if isinstance(grid, Points):
        return grid
    return Points(np.asarray(grid, dtype=float))


def _require_single_site(d: Dataset):
    if len(d.sites) > 1:
        raise ConfigurationError(f"temporal GP expects a single-site dataset, got sites {d.sites}")


def condition(spec: GpModelSpec, theta: Mapping[str, float], d: Dataset, inflation=None,
              X: Points | None = None) -> GpModel:
    """Build the posterior at fixed hyperparameters (no optimisation)."""
    X = Points.from_dataset(d) if X is None else X
    kern = spec.kernel_at(theta)
    y = np.asarray(d.y, dtype=float)
    obs = np.asarray(d.y_sd, dtype=float) ** 2
    infl = np.zeros_like(obs) if inflation is None else np.asarray(inflation, dtype=float)
    coef = _mean_coefs(spec.mean, X.t, y)
    cond = Conditioner(kern, X, y - _mean_at(coef, X.t), obs + infl)
    full = dict(kern.hyperparameters())
    return GpModel(spec, full, kern, X, y, obs, infl, coef, cond, cond.lml())


def log_marginal_likelihood(spec: GpModelSpec, theta: Mapping[str, float], d: Dataset, inflation=None) -> float:
    """log p(y | θ) with Σ_obs = diag(rsl_sd²) (+ input-noise inflation)."""
    return condition(spec, theta, d, inflation).log_likelihood


def _fit(spec: GpModelSpec, d: Dataset, X: Points, restarts: int, seed, inflation, maxiter=None) -> GpModel:
    params = spec.free_params()
    y = np.asarray(d.y, dtype=float)
    noise = np.asarray(d.y_sd, dtype=float) ** 2 + (0.0 if inflation is None else np.asarray(inflation))
    coef = _mean_coefs(spec.mean, X.t, y)
    resid = y - _mean_at(coef, X.t)
    names = [p.name for p in params]
    pinned = spec.pinned()

    def objective(x):
        vals = dict(pinned)
        vals.update(zip(names, x))
        kern = spec.kernel.with_values(vals)
        return Conditioner(kern, X, resid, noise).lml()

    opt = maximize(objective, params, restarts=restarts, seed=seed, maxiter=maxiter, xatol=XATOL, fatol=FATOL)
    return condition(spec, opt.theta, d, inflation, X)


def fit_et_gp(d: Dataset, spec: GpModelSpec | None = None, restarts: int = 4, seed: int | None = 0,
              maxiter: int | None = None) -> GpModel:
    """Maximum-likelihood hyperparameters for a single-site temporal GP."""
    _require_single_site(d)
    spec = spec or GpModelSpec.default_et_gp()
    return _fit(spec, d, Points.from_dataset(d), restarts, seed, None, maxiter)


def predict(model: GpModel, grid, full_cov: bool = True) -> PosteriorField:
    """Posterior of the latent (white-noise-free) RSL at ``grid``."""
    Xg = _as_points(grid)
    m, C = model.cond.field(model.latent_kernel, Xg, full_cov)
    return PosteriorField(Xg, model.prior_mean(Xg) + m, C, "level")


def predictive_at_data(model: GpModel):
    """Mean and variance of a new observation at each training point.

    Variance = latent posterior + observation noise + white noise + inflation.
    """
    f = predict(model, model.X, full_cov=False)
    var = np.diag(f.cov) + model.noise_var + model.white_var(model.X)
    return f.mean, var


# ---------------------------------------------------------------------------
# rates


def _group_by_location(g: Points) -> list[np.ndarray]:
    if not g.has_location:
        return [np.arange(len(g))]
    keys = {}
    for i, key in enumerate(zip(g.lat, g.lon)):
        keys.setdefault(key, []).append(i)
    return [np.array(v) for v in keys.values()]


def rate_operator(grid: Points, window: float) -> np.ndarray:
    """Average-rate difference matrix over ``window`` for a uniform grid.

    With ``m = window / step`` steps, the rate at index ``i`` is
    ``(f[i + ⌈m/2⌉] − f[i − ⌊m/2⌋]) / window``, shifted to stay inside the
    grid at its ends (one-sided differences).
    """
    n = len(grid)
    D = np.zeros((n, n))
    for idx in _group_by_location(grid):
        t = grid.t[idx]
        if idx.size < 2:
            raise ConfigurationError("rate needs at least two grid times per location")
        order = np.argsort(t, kind="stable")
        idx, t = idx[order], t[order]
        steps = np.diff(t)
        h = steps[0]
        if not h > 0 or not np.allclose(steps, h, rtol=1e-9, atol=1e-9 * max(1.0, abs(h))):
            raise ConfigurationError("rate transform needs a strictly increasing uniform time grid")
        if window < h:
            raise ConfigurationError(f"rate window {window} is smaller than the grid spacing {h}")
        m_real = window / h
        m = int(round(m_real))
        if abs(m_real - m) > 1e-9 * max(1.0, m_real):
            raise ConfigurationError(f"grid spacing {h} does not divide the rate window {window}")
        k = idx.size
        if m > k - 1:
            raise ConfigurationError(f"rate window {window} exceeds the grid span {t[-1] - t[0]}")
        up, down = (m + 1) // 2, m // 2
        for j in range(k):
            lo = j - down
            hi = j + up
            if lo < 0:
                lo, hi = 0, m
            if hi > k - 1:
                lo, hi = k - 1 - m, k - 1
            D[idx[j], idx[hi]] += 1.0 / (m * h)
            D[idx[j], idx[lo]] -= 1.0 / (m * h)
    return D


def rate_transform(p: PosteriorField, window: float) -> PosteriorField:
    """Linear map from a level field to average rates over ``window`` years."""
    D = rate_operator(p.grid, window)
    C = D @ p.cov @ D.T
    return PosteriorField(p.grid, D @ p.mean, 0.5 * (C + C.T), "rate", p.label)


# ---------------------------------------------------------------------------
# noisy-input GP


def _median_spacing(t: np.ndarray) -> float:
    u = np.unique(t)
    if u.size < 2:
        return 1.0
    return float(np.median(np.diff(u)))


def fit_nigp(d: Dataset, spec: GpModelSpec | None = None, restarts: int = 4, max_iters: int = 10,
             tol: float = 1e-3, seed: int | None = 0) -> GpModel:
    """Noisy-input GP: fold age uncertainty into output noise.

    Alternates between fitting hyperparameters and setting the inflation to
    ``age_sd² · (∂f̂/∂t)²`` at each datum.  Stops when the largest change in
    inflation, relative to that datum's total noise variance, falls below
    ``tol``; otherwise returns the last fit with ``converged = False``.
    """
    _require_single_site(d)
    spec = spec or GpModelSpec.default_et_gp()
    return fit_nigp_points(d, Points.from_dataset(d), spec, restarts, max_iters, tol, seed)


def fit_nigp_points(d: Dataset, X: Points, spec: GpModelSpec, restarts: int, max_iters: int, tol: float,
                    seed, maxiter=None) -> GpModel:
    model = _fit(spec, d, X, restarts, seed, None, maxiter)
    tsd2 = np.asarray(d.t_sd, dtype=float) ** 2
    if not np.any(tsd2 > 0):
        return model
    h = _median_spacing(X.t) / 10.0
    infl = np.zeros(len(d))
    history = [infl.copy()]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        slope = model.slope_at(X, h)
        new = tsd2 * slope**2
        rel = np.max(np.abs(new - infl) / (model.obs_var + infl + 1e-300))
        infl = new
        history.append(infl.copy())
        warm = spec.with_initial({k: v for k, v in model.theta.items() if k in spec.bounds})
        model = _fit(warm, d, X, 1, seed, infl, maxiter)
        if rel < tol:
            converged = True
            break
    model.converged = converged
    model.iterations = it
    model.history = history
    return model


__all__ = [
    "PosteriorField",
    "GpModelSpec",
    "GpModel",
    "Conditioner",
    "condition",
    "log_marginal_likelihood",
    "fit_et_gp",
    "predict",
    "predictive_at_data",
    "rate_operator",
    "rate_transform",
    "fit_nigp",
    "fit_nigp_points",
]
