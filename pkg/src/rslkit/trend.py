"""Linear regression and errors-in-variables change-point regression."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import _backend
from .data import Dataset
from .engines import AdaptiveStep, gelman_rubin
from .errors import ConfigurationError, NumericError, UnderdeterminedError, ValidationError

_LOG2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# linear regression


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_se: float
    intercept_se: float
    rmse: float
    method: str
    cov: np.ndarray
    weights: np.ndarray | None = None
    error_cov: np.ndarray | None = None

    def predict(self, t):
        return self.intercept + self.slope * np.asarray(t, dtype=float)

    def residuals(self, d: Dataset):
        return d.y - self.predict(d.t)


def fit_linear(d: Dataset, method: str = "OLS", error_cov=None) -> LinearFit:
    """Fit RSL = m·t + β by ordinary, weighted or generalised least squares.

    OLS standard errors use the residual variance; WLS and GLS treat the
    supplied variances as known.  WLS weights are ``1/rsl_sd²``; GLS uses
    ``error_cov`` (default ``diag(rsl_sd²)``).
    """
    method = method.upper()
    t, y = np.asarray(d.t, dtype=float), np.asarray(d.y, dtype=float)
    n = t.size
    if n < 2 or np.ptp(t) == 0:
        raise UnderdeterminedError("linear fit needs at least two distinct ages")
    tc = t.mean()
    X = np.column_stack([np.ones(n), t - tc])
    w = None
    C = None
    if method == "OLS":
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ coef
        dof = max(n - 2, 1)
        s2 = float(r @ r) / dof
        XtX_inv = np.linalg.inv(X.T @ X)
        cov_c = s2 * XtX_inv
    elif method in ("WLS", "GLS"):
        if method == "WLS":
            if np.any(d.y_sd <= 0):
                raise ValidationError("WLS needs rsl_sd > 0 for every observation",
                                      rows=list(np.flatnonzero(d.y_sd <= 0)))
            w = 1.0 / np.asarray(d.y_sd, dtype=float) ** 2
            L = np.diag(1.0 / np.sqrt(w))
        else:
            C = np.diag(np.asarray(d.y_sd, dtype=float) ** 2) if error_cov is None else np.asarray(error_cov, dtype=float)
            if C.shape != (n, n) or not np.allclose(C, C.T):
                raise NumericError("error covariance must be a symmetric n x n matrix")
            try:
                L = linalg.cholesky(C, lower=True)
            except linalg.LinAlgError:
                raise NumericError("error covariance is not positive definite") from None
        Xw = linalg.solve_triangular(L, X, lower=True)
        yw = linalg.solve_triangular(L, y, lower=True)
        coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
        cov_c = np.linalg.inv(Xw.T @ Xw)
        r = y - X @ coef
    else:
        raise ConfigurationError(f"unknown regression method {method!r}")
    # undo the centring: intercept = a - b·tc
    T = np.array([[1.0, -tc], [0.0, 1.0]])
    beta = T @ coef
    cov = T @ cov_c @ T.T
    return LinearFit(
        slope=float(beta[1]),
        intercept=float(beta[0]),
        slope_se=float(math.sqrt(max(cov[1, 1], 0.0))),
        intercept_se=float(math.sqrt(max(cov[0, 0], 0.0))),
        rmse=float(math.sqrt(np.mean(r * r))),
        method=method,
        cov=cov,
        weights=w,
        error_cov=C,
    )


# ---------------------------------------------------------------------------
# change-point regression


@dataclass(frozen=True)
class ChangePointPriors:
    """Prior settings; ``None`` entries are filled from the data.

    Defaults: β ~ N(0, 0.05² (m/yr)²), α₁ ~ N(mean y, (2 sd y)²),
    σ_extra ~ half-normal(1 m), γ uniform and ordered over ``gamma_range``
    (the span of mean ages).
    """

    rate_sd: float = 0.05
    alpha_mean: float | None = None
    alpha_sd: float | None = None
    sigma_scale: float = 1.0
    gamma_range: tuple[float, float] | None = None


@dataclass(frozen=True)
class McmcSettings:
    n_draws: int = 1500
    n_burn: int = 1500
    n_chains: int = 2
    thin: int = 1
    seed: int | None = 0


@dataclass
class ChangePointFit:
    """Posterior draws of a continuous piecewise-linear model.

    ``rates[:, j]`` is the rate of segment ``j`` (segment 0 lies before the
    first change point).  ``levels[:, k]`` is the RSL at change point ``k``.
    """

    n_cp: int
    change_points: np.ndarray
    rates: np.ndarray
    alpha1: np.ndarray
    levels: np.ndarray
    ages: np.ndarray
    sigma_extra: np.ndarray
    deviance: np.ndarray
    dic: float
    p_d: float
    empty_segment: bool
    empty_fraction: np.ndarray
    acceptance: dict
    rhat: dict = field(default_factory=dict)
    chain: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.change_points.shape[0]

    def curves(self, t) -> np.ndarray:
        """RSL at times ``t`` for every retained draw (draws × len(t))."""
        t = np.asarray(t, dtype=float)
        ev = _backend.changepoint_eval
        return np.array([ev(t, g, a, b) for g, a, b in zip(self.change_points, self.alpha1, self.rates)])

    def predict(self, t) -> dict:
        c = self.curves(t)
        q = np.percentile(c, [2.5, 50, 97.5], axis=0)
        return {"t": np.asarray(t, dtype=float), "mean": c.mean(0), "sd": c.std(0, ddof=1),
                "p2.5": q[0], "p50": q[1], "p97.5": q[2]}

    def draws_table(self) -> tuple[list[str], np.ndarray]:
        names = [f"gamma{k + 1}" for k in range(self.n_cp)]
        names += [f"rate{j + 1}" for j in range(self.n_cp + 1)]
        names += ["alpha1"] + [f"level{k + 1}" for k in range(self.n_cp)] + ["sigma_extra"]
        cols = np.column_stack([self.change_points, self.rates, self.alpha1, self.levels, self.sigma_extra])
        return names, cols


def levels_from_continuity(gammas, alpha1, rates) -> np.ndarray:
    """RSL at each change point: α₁ at γ₁, then αₖ = αₖ₋₁ + (rate between γₖ₋₁ and γₖ)·(γₖ − γₖ₋₁)."""
    g = np.atleast_2d(gammas)
    a = np.atleast_1d(alpha1).astype(float)
    b = np.atleast_2d(rates)
    m = g.shape[1]
    out = np.empty_like(g, dtype=float)
    out[:, 0] = a
    for k in range(1, m):
        out[:, k] = out[:, k - 1] + b[:, k] * (g[:, k] - g[:, k - 1])
    return out


def _collapsed(t, y, var0, sigma, g, m0, P0, logdetV0):
    """Log p(y | ages, γ, σ) with (α₁, β) integrated out, plus the posterior of (α₁, β)."""
    w = 1.0 / (var0 + sigma * sigma)
    A, b, yy = _backend.changepoint_normal_eq(t, y, w, g)
    Pn = P0 + A
    try:
        L = linalg.cholesky(Pn, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return -np.inf, None, None
    h = P0 @ m0 + b
    u = linalg.solve_triangular(L, h, lower=True, check_finite=False)
    quad = yy + float(m0 @ P0 @ m0) - float(u @ u)
    logdetPn = 2.0 * float(np.log(np.diag(L)).sum())
    n = t.size
    lml = -0.5 * (quad + n * _LOG2PI - float(np.log(w).sum()) + logdetV0 + logdetPn)
    return lml, L, u


def _draw_coef(L, u, rng):
    mean = linalg.solve_triangular(L.T, u, lower=False, check_finite=False)
    z = rng.standard_normal(u.size)
    return mean + linalg.solve_triangular(L.T, z, lower=False, check_finite=False)


def _marginal_deviance(tbar, tsd, y, var0, sigma, g, coef):
    """−2 log p(y | curve, σ) with ages integrated to first order about their means."""
    f = _backend.changepoint_eval(tbar, g, coef[0], coef[1:])
    slope = coef[1:][np.searchsorted(g, tbar)]
    v = var0 + sigma * sigma + (slope * tsd) ** 2
    r = y - f
    return float(np.sum(_LOG2PI + np.log(v) + r * r / v))


def _run_cp_chain(d: Dataset, n_cp, pri: ChangePointPriors, n_draws, n_burn, thin, rng):
    y = np.asarray(d.y, dtype=float)
    tbar = np.asarray(d.t, dtype=float)
    tsd = np.asarray(d.t_sd, dtype=float)
    var0 = np.asarray(d.y_sd, dtype=float) ** 2
    n = y.size
    p = n_cp + 2
    lo, hi = pri.gamma_range if pri.gamma_range is not None else (tbar.min(), tbar.max())
    if not lo < hi:
        raise ConfigurationError("change-point support is empty")
    a_mean = float(y.mean()) if pri.alpha_mean is None else pri.alpha_mean
    a_sd = (2.0 * float(y.std()) or 1.0) if pri.alpha_sd is None else pri.alpha_sd
    m0 = np.zeros(p)
    m0[0] = a_mean
    prior_var = np.r_[a_sd**2, np.full(n_cp + 1, pri.rate_sd**2)]
    P0 = np.diag(1.0 / prior_var)
    logdetV0 = float(np.log(prior_var).sum())
    free = tsd > 0

    g = lo + (hi - lo) * (np.arange(1, n_cp + 1) / (n_cp + 1))
    t = tbar.copy()
    sigma = max(0.1 * float(np.std(y)), 1e-3)
    lml, L, u = _collapsed(t, y, var0, sigma, g, m0, P0, logdetV0)
    if L is None:
        raise NumericError("change-point posterior precision is not positive definite")
    coef = _draw_coef(L, u, rng)

    g_steps = [AdaptiveStep(0.05 * (hi - lo)) for _ in range(n_cp)]
    s_step = AdaptiveStep(0.3)
    a_step = AdaptiveStep(1.0)
    acc = {"gamma": np.zeros(n_cp), "sigma": 0.0, "ages": 0.0}
    out_g = np.empty((n_draws, n_cp))
    out_c = np.empty((n_draws, p))
    out_s = np.empty(n_draws)
    out_t = np.empty((n_draws, n))
    out_dev = np.empty(n_draws)
    empty = np.zeros(n_cp + 1)
    kept = 0
    total = n_burn + n_draws * thin
    ss2 = pri.sigma_scale**2
    for it in range(total):
        if it == n_burn:
            for s in (*g_steps, s_step, a_step):
                s.freeze()
        post = it >= n_burn
        # latent ages, independent given the curve
        if free.any():
            prop = t.copy()
            prop[free] = t[free] + a_step.scale * tsd[free] * rng.standard_normal(free.sum())
            f_old = _backend.changepoint_eval(t, g, coef[0], coef[1:])
            f_new = _backend.changepoint_eval(prop, g, coef[0], coef[1:])
            v = var0 + sigma * sigma
            with np.errstate(divide="ignore", invalid="ignore"):
                dl = (-0.5 * ((y - f_new) ** 2 - (y - f_old) ** 2) / v
                      - 0.5 * (((prop - tbar) / tsd) ** 2 - ((t - tbar) / tsd) ** 2))
            dl = dl[free]
            ok = np.log(rng.random(dl.size)) < dl
            idx = np.flatnonzero(free)[ok]
            t[idx] = prop[idx]
            a_step.update(float(np.mean(np.minimum(1.0, np.exp(np.minimum(dl, 0.0))))))
            if post:
                acc["ages"] += ok.mean()
        # change points with (α₁, β) integrated out
        lml, L, u = _collapsed(t, y, var0, sigma, g, m0, P0, logdetV0)
        for k in range(n_cp):
            gk = g[k] + g_steps[k].scale * rng.standard_normal()
            left = g[k - 1] if k > 0 else lo
            right = g[k + 1] if k < n_cp - 1 else hi
            a = 0.0
            if left < gk < right:
                gp = g.copy()
                gp[k] = gk
                lml_p, Lp, up = _collapsed(t, y, var0, sigma, gp, m0, P0, logdetV0)
                if Lp is not None:
                    a = 1.0 if lml_p >= lml else math.exp(lml_p - lml)
                    if rng.random() < a:
                        g, lml, L, u = gp, lml_p, Lp, up
                        if post:
                            acc["gamma"][k] += 1
            g_steps[k].update(a)
        coef = _draw_coef(L, u, rng)
        # residual scale
        f = _backend.changepoint_eval(t, g, coef[0], coef[1:])
        r2 = (y - f) ** 2
        ls = math.log(sigma)
        ls_p = ls + s_step.scale * rng.standard_normal()
        sp = math.exp(ls_p)

        def logp(s, lsv):
            v = var0 + s * s
            return -0.5 * float(np.sum(np.log(v) + r2 / v)) - 0.5 * s * s / ss2 + lsv

        lp_old, lp_new = logp(sigma, ls), logp(sp, ls_p)
        a = 1.0 if lp_new >= lp_old else math.exp(lp_new - lp_old)
        if rng.random() < a:
            sigma = sp
            if post:
                acc["sigma"] += 1
        s_step.update(a)

        if post and (it - n_burn) % thin == 0:
            out_g[kept] = g
            out_c[kept] = coef
            out_s[kept] = sigma
            out_t[kept] = t
            out_dev[kept] = _marginal_deviance(tbar, tsd, y, var0, sigma, g, coef)
            seg = np.searchsorted(g, t)
            empty += np.bincount(seg, minlength=n_cp + 1) == 0
            kept += 1
    steps = n_draws * thin
    rates = {"gamma": acc["gamma"] / steps, "sigma": acc["sigma"] / steps, "ages": acc["ages"] / steps}
    return out_g, out_c, out_s, out_t, out_dev, empty / n_draws, rates


def fit_changepoint(d: Dataset, n_cp: int, priors: ChangePointPriors | None = None,
                    mcmc: McmcSettings | None = None) -> ChangePointFit:
    """Bayesian errors-in-variables change-point regression.

    Sampler: per-datum Metropolis updates of true ages; random-walk
    Metropolis on each change point with the level and rates integrated out;
    an exact conjugate draw of level and rates; log-scale Metropolis on the
    extra residual scale.

    DIC = mean deviance + (mean − minimum deviance).  The deviance is that of the RSL
    values with each age integrated out to first order (age variance times
    the squared local rate), so latent ages do not count as parameters.
    """
    priors = priors or ChangePointPriors()
    mcmc = mcmc or McmcSettings()
    if n_cp < 1:
        raise ConfigurationError("n_cp must be at least 1")
    if len(d) < 2 * (n_cp + 1):
        raise UnderdeterminedError(f"{n_cp} change points need at least {2 * (n_cp + 1)} observations")
    seqs = np.random.SeedSequence(mcmc.seed).spawn(mcmc.n_chains)
    parts = [_run_cp_chain(d, n_cp, priors, mcmc.n_draws, mcmc.n_burn, mcmc.thin, np.random.default_rng(s))
             for s in seqs]
    G = np.vstack([p[0] for p in parts])
    C = np.vstack([p[1] for p in parts])
    S = np.concatenate([p[2] for p in parts])
    T = np.vstack([p[3] for p in parts])
    D = np.concatenate([p[4] for p in parts])
    empty_frac = np.mean([p[5] for p in parts], axis=0)
    acc = {
        "gamma": np.mean([p[6]["gamma"] for p in parts], axis=0),
        "sigma": float(np.mean([p[6]["sigma"] for p in parts])),
        "ages": float(np.mean([p[6]["ages"] for p in parts])),
    }
    chain_idx = np.repeat(np.arange(mcmc.n_chains), mcmc.n_draws)
    alpha1 = C[:, 0]
    rates = C[:, 1:]
    levels = levels_from_continuity(G, alpha1, rates)

    # effective parameter count as mean minus minimum deviance (≈ k for a
    # near-Gaussian posterior); the plug-in D(θ̄) breaks on multimodal γ
    d_bar = float(D.mean())
    p_d = d_bar - float(D.min())
    flag = bool(np.any(empty_frac > 0.5))
    if flag:
        warnings.warn("a change-point segment is empty in more than half of the draws", RuntimeWarning, stacklevel=2)
    rhat = {}
    if mcmc.n_chains >= 2:
        names = [f"gamma{k + 1}" for k in range(n_cp)] + [f"rate{j + 1}" for j in range(n_cp + 1)] + ["sigma_extra"]
        stacked = np.column_stack([G, rates, S]).reshape(mcmc.n_chains, mcmc.n_draws, -1)
        rhat = dict(zip(names, map(float, gelman_rubin(stacked))))
    return ChangePointFit(
        n_cp=n_cp, change_points=G, rates=rates, alpha1=alpha1, levels=levels, ages=T, sigma_extra=S,
        deviance=D, dic=d_bar + p_d, p_d=p_d, empty_segment=flag, empty_fraction=empty_frac,
        acceptance=acc, rhat=rhat, chain=chain_idx,
    )


@dataclass
class Selection:
    """Iterates as ``(best, table)``."""

    best: int
    table: dict
    strong_preference: bool
    fits: dict

    def __iter__(self):
        yield self.best
        yield self.table


def select_changepoints(d: Dataset, max_cp: int, priors: ChangePointPriors | None = None,
                        mcmc: McmcSettings | None = None, margin: float = 2.0) -> Selection:
    """Fit 1..max_cp change points and pick the smallest DIC.

    ``strong_preference`` is set when every other count's DIC exceeds the
    best by more than ``margin``.
    """
    if max_cp < 1:
        raise ConfigurationError("max_cp must be at least 1")
    fits, table = {}, {}
    for m in range(1, max_cp + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fits[m] = fit_changepoint(d, m, priors, mcmc)
        table[m] = fits[m].dic
    best = min(table, key=table.get)
    others = [v - table[best] for k, v in table.items() if k != best]
    strong = bool(others) and min(others) > margin
    return Selection(best, table, strong, fits)


__all__ = [
    "LinearFit",
    "fit_linear",
    "ChangePointPriors",
    "McmcSettings",
    "ChangePointFit",
    "fit_changepoint",
    "select_changepoints",
    "levels_from_continuity",
    "Selection",
]
