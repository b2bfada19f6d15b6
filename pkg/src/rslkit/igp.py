"""Errors-in-variables integrated Gaussian process.

The rate of RSL change carries a stationary GP prior; the level is its
integral from a fixed origin ``t0`` plus a Gaussian intercept.  For a
stationary rate kernel k(r) define

    K1(x) = ∫₀ˣ k(r) dr,        K2(x) = ∫₀ˣ (x − r) k(r) dr,

so that the level covariance and level/rate cross-covariance reduce to

    C(s, t) = K2(s − t0) + K2(t − t0) − K2(s − t),
    X(s, t) = K1(s − t) + K1(t − t0).

Both are available in closed form for a squared-exponential rate kernel and
by Gauss–Legendre quadrature otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.special import erf

from . import kernels as K
from .data import Dataset
from .engines import AdaptiveStep, SampleChain, attach_rhat
from .errors import ConfigurationError, DivergenceError, NumericError
from .gp import PosteriorField
from .kernels import Kernel, Points
from .trend import McmcSettings

NODES_PER_PANEL = 24
RICHARDSON_TOL = 1e-6
QUANTILES = (2.5, 50.0, 97.5)


# ---------------------------------------------------------------------------
# quadrature


@lru_cache(maxsize=8)
def _gauss_legendre(m: int):
    x, w = np.polynomial.legendre.leggauss(m)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def length_scale(k: Kernel) -> float:
    """Distance at which a stationary kernel has decayed appreciably."""
    if isinstance(k, K.SquaredExponential | K.Matern):
        return float(k.l)
    if isinstance(k, K.PoweredExponential):
        return float(k.unit * (-math.log(k.rho)) ** (-1.0 / k.kappa))
    if isinstance(k, K.RationalQuadratic):
        return float(k.tau)
    if isinstance(k, K.Constant):
        return math.inf
    raise ConfigurationError(f"no length scale defined for {type(k).__name__}")


def _rate_kernel(k: Kernel) -> K.Stationary:
    if not isinstance(k, K.Stationary):
        raise ConfigurationError("the rate kernel must be a stationary temporal kernel")
    k.check()
    return k


def _se_params(k: Kernel):
    """(σ², ℓ) if ``k`` is a squared exponential in disguise, else None."""
    if isinstance(k, K.SquaredExponential):
        return float(k.s2), float(k.l)
    if isinstance(k, K.PoweredExponential) and k.kappa == 2.0:
        return float(k.s2), float(k.unit / math.sqrt(-2.0 * math.log(k.rho)))
    return None


def _k1_se(x, s2, l):
    return s2 * l * math.sqrt(math.pi / 2.0) * erf(x / (math.sqrt(2.0) * l))


def _k2_se(x, s2, l):
    c = math.sqrt(2.0) * l
    return s2 * (l * math.sqrt(math.pi / 2.0) * x * erf(x / c) + l * l * (np.exp(-(x / c) ** 2) - 1.0))


def _panels(k: K.Stationary, span: float, per_length: int) -> int:
    ell = length_scale(k)
    if not math.isfinite(ell) or span <= 0:
        return 1
    return max(1, math.ceil(span * per_length / ell))


GRADED_LEVELS = 14
GRADING_RATIO = 0.15


def _cusp_at_zero(k: K.Stationary) -> bool:
    # ρ^(r^κ) is not analytic in r ≥ 0 unless κ is 1 or 2
    return isinstance(k, K.PoweredExponential) and k.kappa not in (1.0, 2.0)


def _unit_nodes(panels: int, m: int, graded: bool):
    """Gauss–Legendre nodes and weights on [0, 1].

    With ``graded`` the first panel is split geometrically toward 0, which
    restores fast convergence for integrands with an r^κ cusp there.
    """
    xi, w = _gauss_legendre(m)
    edges = np.arange(panels + 1, dtype=float) / panels
    if graded:
        first = edges[1] * GRADING_RATIO ** np.arange(GRADED_LEVELS, -1, -1)
        edges = np.concatenate([[0.0], first, edges[2:]])
    a, b = edges[:-1, None], edges[1:, None]
    u = (a + 0.5 * (b - a) * (xi + 1.0)[None, :]).ravel()
    wu = (0.5 * (b - a) * w[None, :]).ravel()
    return u, wu


def _k12_quad(k: K.Stationary, x: np.ndarray, panels: int, m: int = NODES_PER_PANEL):
    """K1 and K2 at each ``x`` using ``panels`` panels on [0, |x|]."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x).ravel()
    u, wu = _unit_nodes(panels, m, _cusp_at_zero(k))
    k1 = np.empty(ax.size)
    k2 = np.empty(ax.size)
    chunk = max(1, 200_000 // u.size)
    for a in range(0, ax.size, chunk):
        xa = ax[a:a + chunk, None]
        kv = k.fn(xa * u[None, :]) * wu[None, :]
        k1[a:a + chunk] = xa[:, 0] * kv.sum(axis=1)
        k2[a:a + chunk] = xa[:, 0] ** 2 * (kv * (1.0 - u[None, :])).sum(axis=1)
    return (np.sign(x).ravel() * k1).reshape(x.shape), k2.reshape(x.shape)


def _k12_checked(k: K.Stationary, x: np.ndarray, per_length: int = 2):
    span = float(np.max(np.abs(x))) if np.size(x) else 0.0
    p = _panels(k, span, per_length)
    a1, a2 = _k12_quad(k, x, p)
    b1, b2 = _k12_quad(k, x, 2 * p)
    scale1 = max(float(np.max(np.abs(b1))), 1e-300) if b1.size else 1.0
    scale2 = max(float(np.max(np.abs(b2))), 1e-300) if b2.size else 1.0
    err = max(float(np.max(np.abs(a1 - b1), initial=0.0)) / scale1,
              float(np.max(np.abs(a2 - b2), initial=0.0)) / scale2)
    if err > RICHARDSON_TOL:
        raise NumericError(f"quadrature did not converge: panel doubling changed the result by {err:.2e}")
    return b1, b2


def _k1(k, x, method):
    se = _se_params(k)
    if method == "closed" or (method == "auto" and se is not None):
        if se is None:
            raise ConfigurationError("closed form needs a squared-exponential rate kernel")
        return _k1_se(np.asarray(x, dtype=float), *se)
    return _k12_checked(k, np.asarray(x, dtype=float))[0]


def _k2(k, x, method):
    se = _se_params(k)
    if method == "closed" or (method == "auto" and se is not None):
        if se is None:
            raise ConfigurationError("closed form needs a squared-exponential rate kernel")
        return _k2_se(np.asarray(x, dtype=float), *se)
    return _k12_checked(k, np.asarray(x, dtype=float))[1]


def _check_origin(t0, *arrays):
    for a in arrays:
        if np.any(np.asarray(a) < t0):
            raise ConfigurationError("integration times must not precede t0")


def _tensor_cov(k: K.Stationary, s: np.ndarray, t: np.ndarray, t0: float, panels: int, m: int):
    xi, w = _gauss_legendre(m)
    base = ((np.arange(panels)[:, None] + 0.5 * (xi + 1.0)[None, :]) / panels).ravel()
    wb = np.tile(w, panels) * (0.5 / panels)
    U = t0 + (s - t0)[:, None] * base[None, :]
    Wu = (s - t0)[:, None] * wb[None, :]
    V = t0 + (t - t0)[:, None] * base[None, :]
    Wv = (t - t0)[:, None] * wb[None, :]
    out = np.empty((s.size, t.size))
    for i in range(s.size):
        kv = k.fn(np.abs(U[i][None, :, None] - V[:, None, :]))
        out[i] = np.einsum("jab,a,jb->j", kv, Wu[i], Wv)
    return out


def _direct_cross(k: K.Stationary, s: np.ndarray, t: np.ndarray, t0: float, panels: int, m: int):
    # ∫ k(u − t) du over [t0, s], split at u = t so the kernel's kink sits on a panel edge
    out = np.zeros((s.size, t.size))
    u, w = _unit_nodes(panels, m, _cusp_at_zero(k))
    for i, si in enumerate(s):
        for j, tj in enumerate(t):
            cuts = [t0, si] if not t0 < tj < si else [t0, tj, si]
            for a, b in zip(cuts[:-1], cuts[1:]):
                if b <= a:
                    continue
                # walk away from the end nearest t so grading lands on the kink
                near, far = (a, b) if abs(a - tj) <= abs(b - tj) else (b, a)
                out[i, j] += (b - a) * np.sum(w * k.fn(np.abs(near + (far - near) * u - tj)))
    return out


def integrated_cov(k_rate: Kernel, s, t, t0: float, method: str = "auto") -> np.ndarray:
    """Covariance of the integrated rate process, ∫∫ k(u, v) over [t0, s]×[t0, t].

    Parameters
    ----------
    method
        ``"closed"`` uses the error-function form (squared-exponential
        kernels only); ``"quadrature"`` the one-dimensional reduction;
        ``"tensor"`` the literal two-dimensional Gauss–Legendre product rule
        (accurate only for kernels smooth at zero lag, since the integrand
        has a ridge along u = v);
        ``"auto"`` picks the closed form when it exists.

    Raises
    ------
    NumericError
        If doubling the number of panels moves the result by more than 1e-6
        relative.
    """
    k = _rate_kernel(k_rate)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _check_origin(t0, s, t)
    if method == "tensor":
        span = float(max(s.max(), t.max()) - t0)
        p = _panels(k, span, 2)
        a = _tensor_cov(k, s, t, t0, p, NODES_PER_PANEL)
        b = _tensor_cov(k, s, t, t0, 2 * p, NODES_PER_PANEL)
        scale = max(float(np.max(np.abs(b))), 1e-300)
        if np.max(np.abs(a - b)) / scale > RICHARDSON_TOL:
            raise NumericError("tensor quadrature did not converge under panel doubling")
        return b
    if method not in ("auto", "closed", "quadrature"):
        raise ConfigurationError(f"unknown integration method {method!r}")
    ds = s - t0
    dt = t - t0
    diff = s[:, None] - t[None, :]
    allx = np.concatenate([ds, dt, diff.ravel()])
    k2 = _k2(k, allx, method)
    a, b = k2[: s.size], k2[s.size: s.size + t.size]
    return a[:, None] + b[None, :] - k2[s.size + t.size:].reshape(diff.shape)


def cross_cov(k_rate: Kernel, s, t, t0: float, method: str = "auto") -> np.ndarray:
    """Covariance between the level at ``s`` and the rate at ``t``: ∫ₜ₀ˢ k(u, t) du.

    ``method`` is as for :func:`integrated_cov`; ``"tensor"`` here means the
    literal one-dimensional rule on [t0, s].
    """
    k = _rate_kernel(k_rate)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _check_origin(t0, s)
    if method == "tensor":
        span = float(s.max() - t0)
        p = _panels(k, span, 2)
        a = _direct_cross(k, s, t, t0, p, NODES_PER_PANEL)
        b = _direct_cross(k, s, t, t0, 2 * p, NODES_PER_PANEL)
        if np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300) > RICHARDSON_TOL:
            raise NumericError("direct quadrature did not converge under panel doubling")
        return b
    if method not in ("auto", "closed", "quadrature"):
        raise ConfigurationError(f"unknown integration method {method!r}")
    diff = s[:, None] - t[None, :]
    allx = np.concatenate([diff.ravel(), t - t0])
    k1 = _k1(k, allx, method)
    return k1[: diff.size].reshape(diff.shape) + k1[diff.size:][None, :]


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class IgpPriors:
    """Prior scales in metres and years.

    ``alpha_mean`` defaults to the RSL of the oldest datum.
    """

    nu_scale: float = 0.01
    rho_range: tuple = (0.01, 0.99)
    sigma_scale: float = 0.5
    alpha_mean: float | None = None
    alpha_sd: float = 2.0


@dataclass(frozen=True)
class IgpSpec:
    """Rate kernel, priors, and quadrature settings for the EIV-IGP.

    The rate kernel's ``s2`` and ``rho`` are starting values for the
    sampler; ``kappa`` and ``unit`` stay fixed.
    """

    rate_kernel: K.PoweredExponential = field(
        default_factory=lambda: K.PoweredExponential(s2=1e-5, rho=0.5, kappa=2.0, unit=100.0, name="rate"))
    priors: IgpPriors = field(default_factory=IgpPriors)
    nodes_per_panel: int = NODES_PER_PANEL
    panels_per_length: int = 2
    t0: float | None = None
    age_block: int = 8

    def __post_init__(self):
        if not isinstance(self.rate_kernel, K.PoweredExponential):
            raise ConfigurationError("the IGP rate kernel is a powered exponential")
        self.rate_kernel.check()
        if self.nodes_per_panel * self.panels_per_length < 8:
            raise ConfigurationError("quadrature needs at least 8 nodes per kernel length scale")
        lo, hi = self.priors.rho_range
        if not 0.0 < lo < hi < 1.0:
            raise ConfigurationError("rho_range must satisfy 0 < lo < hi < 1")
        if self.priors.nu_scale <= 0 or self.priors.sigma_scale <= 0 or self.priors.alpha_sd <= 0:
            raise ConfigurationError("prior scales must be positive")
        if self.age_block < 1:
            raise ConfigurationError("age_block must be at least 1")

    def kernel_at(self, nu2: float, rho: float) -> K.PoweredExponential:
        k = self.rate_kernel
        return K.PoweredExponential(s2=nu2, rho=rho, kappa=k.kappa, unit=k.unit, name=k.name)

    def origin(self, d: Dataset) -> float:
        """Integration origin: below every plausible true age by one rate length scale."""
        if self.t0 is not None:
            return float(self.t0)
        return float(np.min(d.t - 4.0 * d.t_sd)) - length_scale(self.rate_kernel)


class _Prior:
    """Level/rate prior covariances for one set of rate hyperparameters."""

    def __init__(self, spec: IgpSpec, nu2: float, rho: float, t0: float, alpha_var: float):
        self.k = spec.kernel_at(nu2, rho)
        self.t0 = t0
        self.alpha_var = alpha_var
        self.method = "auto" if _se_params(self.k) is not None else "quadrature"

    def level(self, s, t):
        return integrated_cov(self.k, s, t, self.t0, self.method) + self.alpha_var

    def level_rate(self, s, t):
        return cross_cov(self.k, s, t, self.t0, self.method)

    def rate(self, s, t):
        return self.k.fn(np.abs(np.subtract.outer(s, t)))


def _loglik(prior: _Prior, t, y, var, mu):
    C = prior.level(t, t)
    C[np.diag_indices_from(C)] += var
    try:
        L, _ = K.cholesky(C)
    except NumericError:
        return -math.inf, None, None
    r = y - mu
    a = linalg.cho_solve((L, True), r)
    ll = -0.5 * float(r @ a) - float(np.log(np.diag(L)).sum()) - 0.5 * r.size * math.log(2.0 * math.pi)
    return ll, L, a


def _log_prior_z(nu2, rho, sigma, pri: IgpPriors):
    """Log prior density in the sampler's coordinates (log ν², ρ, log σ)."""
    lo, hi = pri.rho_range
    if not lo < rho < hi:
        return -math.inf
    nu = math.sqrt(nu2)
    return (-0.5 * nu2 / pri.nu_scale**2 + math.log(nu)
            - 0.5 * sigma**2 / pri.sigma_scale**2 + math.log(sigma))


def _run_igp_chain(spec: IgpSpec, d: Dataset, t0: float, grid: np.ndarray, n_draws, n_burn, thin, rng):
    pri = spec.priors
    y = np.asarray(d.y, dtype=float)
    tbar = np.asarray(d.t, dtype=float)
    tsd = np.asarray(d.t_sd, dtype=float)
    var0 = np.asarray(d.y_sd, dtype=float) ** 2
    n = y.size
    mu = float(y[np.argmin(tbar)]) if pri.alpha_mean is None else float(pri.alpha_mean)
    avar = pri.alpha_sd**2
    free = np.flatnonzero(tsd > 0)
    blocks = [free[i:i + spec.age_block] for i in range(0, free.size, spec.age_block)]

    nu2, rho = float(spec.rate_kernel.s2), float(spec.rate_kernel.rho)
    rho = min(max(rho, pri.rho_range[0] + 1e-6), pri.rho_range[1] - 1e-6)
    sigma = max(0.1 * float(np.std(y)), 1e-3)
    t = tbar.copy()

    def state_ll(nu2_, rho_, sigma_, t_):
        return _loglik(_Prior(spec, nu2_, rho_, t0, avar), t_, y, var0 + sigma_**2, mu)

    ll, L, a = state_ll(nu2, rho, sigma, t)
    if not math.isfinite(ll):
        raise DivergenceError("IGP likelihood is not finite at the initial state")

    steps = {"nu2": AdaptiveStep(0.5), "rho": AdaptiveStep(0.1), "sigma": AdaptiveStep(0.5)}
    b_steps = [AdaptiveStep(2.4 / math.sqrt(len(b))) for b in blocks]
    acc = {"nu2": 0.0, "rho": 0.0, "sigma": 0.0, "ages": 0.0}
    G = grid.size
    out_h = np.empty((n_draws, 3))
    out_t = np.empty((n_draws, n))
    out_lp = np.empty(n_draws)
    lev_m = np.empty((n_draws, G))
    rate_m = np.empty((n_draws, G))
    lev_v = np.empty((n_draws, G))
    rate_v = np.empty((n_draws, G))
    lev_d = np.empty((n_draws, G))
    rate_d = np.empty((n_draws, G))
    kept = 0
    bad = 0
    total = n_burn + n_draws * thin

    def mh(step, ll_new, lp_new, ll_old, lp_old):
        lr = (ll_new + lp_new) - (ll_old + lp_old)
        p = 1.0 if lr >= 0 else (math.exp(lr) if math.isfinite(lr) else 0.0)
        step.update(p)
        return rng.random() < p

    for it in range(total):
        if it == n_burn:
            for s in (*steps.values(), *b_steps):
                s.freeze()
        post = it >= n_burn
        lp = _log_prior_z(nu2, rho, sigma, pri)

        # rate hyperparameters and extra noise, one at a time
        for name in ("nu2", "rho", "sigma"):
            cand = {"nu2": nu2, "rho": rho, "sigma": sigma}
            e = steps[name].scale * rng.standard_normal()
            if name == "rho":
                cand["rho"] = rho + e
            else:
                cand[name] = cand[name] * math.exp(e)
            lp_c = _log_prior_z(cand["nu2"], cand["rho"], cand["sigma"], pri)
            if not math.isfinite(lp_c):
                steps[name].update(0.0)
                continue
            ll_c, L_c, a_c = state_ll(cand["nu2"], cand["rho"], cand["sigma"], t)
            if not math.isfinite(ll_c):
                bad += 1
                if bad >= 1000:
                    raise DivergenceError("1000 consecutive non-finite IGP proposals")
                steps[name].update(0.0)
                continue
            bad = 0
            if mh(steps[name], ll_c, lp_c, ll, lp):
                nu2, rho, sigma = cand["nu2"], cand["rho"], cand["sigma"]
                ll, L, a, lp = ll_c, L_c, a_c, lp_c
                if post:
                    acc[name] += 1

        # latent ages in blocks
        n_acc = 0
        for b, st in zip(blocks, b_steps):
            prop = t.copy()
            prop[b] = t[b] + st.scale * tsd[b] * rng.standard_normal(b.size)
            if np.any(prop[b] < t0):
                st.update(0.0)
                continue
            ll_c, L_c, a_c = state_ll(nu2, rho, sigma, prop)
            if not math.isfinite(ll_c):
                st.update(0.0)
                continue
            lpa = -0.5 * float(np.sum(((prop[b] - tbar[b]) / tsd[b]) ** 2))
            lpo = -0.5 * float(np.sum(((t[b] - tbar[b]) / tsd[b]) ** 2))
            if mh(st, ll_c, lpa, ll, lpo):
                t, ll, L, a = prop, ll_c, L_c, a_c
                n_acc += 1
        if post and blocks:
            acc["ages"] += n_acc / len(blocks)

        if post and (it - n_burn) % thin == 0:
            prior = _Prior(spec, nu2, rho, t0, avar)
            Ctl = prior.level(t, grid)
            Ctr = prior.level_rate(t, grid)
            cross = np.hstack([Ctl, Ctr])
            joint = np.block([[prior.level(grid, grid), prior.level_rate(grid, grid)],
                              [prior.level_rate(grid, grid).T, prior.rate(grid, grid)]])
            m = cross.T @ a
            V = linalg.solve_triangular(L, cross, lower=True)
            cov = joint - V.T @ V
            cov = 0.5 * (cov + cov.T)
            var = np.clip(np.diag(cov), 0.0, None)
            # factor the correlation matrix so jitter is relative to each sd
            sd = np.sqrt(np.maximum(var, 1e-300))
            Lc, _ = K.cholesky(cov / np.outer(sd, sd))
            f = m + sd * (Lc @ rng.standard_normal(2 * G))
            lev_m[kept], rate_m[kept] = mu + m[:G], m[G:]
            lev_v[kept], rate_v[kept] = var[:G], var[G:]
            lev_d[kept], rate_d[kept] = mu + f[:G], f[G:]
            out_h[kept] = (nu2, rho, sigma)
            out_t[kept] = t
            out_lp[kept] = ll + lp - 0.5 * float(np.sum(((t[free] - tbar[free]) / tsd[free]) ** 2))
            kept += 1

    steps_n = n_draws * thin
    rates = {k: v / steps_n for k, v in acc.items()}
    return dict(h=out_h, t=out_t, lp=out_lp, lev=(lev_m, lev_v, lev_d), rate=(rate_m, rate_v, rate_d),
                acc=rates)


def _mixture(grid: np.ndarray, means, variances, draws, kind: str) -> PosteriorField:
    mean = means.mean(axis=0)
    cov = np.diag(variances.mean(axis=0) + means.var(axis=0))
    q = {p: np.percentile(draws, p, axis=0) for p in QUANTILES}
    return PosteriorField(Points(grid), mean, cov, kind=kind, quantiles=q)


@dataclass
class IgpFit:
    """Posterior of the EIV-IGP; iterates as ``(chain, {"level": ..., "rate": ...})``.

    Field means are averages of per-draw conditional means; ``cov`` holds
    only the mixture's marginal variances on its diagonal, and the
    ``quantiles`` come from one latent function draw per retained sample.
    """

    chain: SampleChain
    level: PosteriorField
    rate: PosteriorField
    ages: np.ndarray
    t0: float
    grid: np.ndarray

    def __iter__(self):
        yield self.chain
        yield {"level": self.level, "rate": self.rate}


def default_grid(d: Dataset, n: int = 101) -> np.ndarray:
    return np.linspace(float(d.t.min()), float(d.t.max()), n)


def fit_eiv_igp(d: Dataset, spec: IgpSpec | None = None, mcmc: McmcSettings | None = None,
                grid=None) -> IgpFit:
    """Sample the EIV-IGP posterior and summarise level and rate on ``grid``.

    Sampled quantities: ν², ρ, σ_extra and every true age with a nonzero
    age sd.  The intercept is integrated out analytically.
    """
    spec = spec or IgpSpec()
    mcmc = mcmc or McmcSettings()
    if len(d.sites) != 1:
        raise ConfigurationError("fit_eiv_igp expects a single-site dataset")
    t0 = spec.origin(d)
    grid = default_grid(d) if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid < t0):
        raise ConfigurationError("prediction grid starts before the integration origin")
    seqs = np.random.SeedSequence(mcmc.seed).spawn(mcmc.n_chains)
    parts = [_run_igp_chain(spec, d, t0, grid, mcmc.n_draws, mcmc.n_burn, mcmc.thin, np.random.default_rng(s))
             for s in seqs]
    H = np.vstack([p["h"] for p in parts])
    T = np.vstack([p["t"] for p in parts])
    lp = np.concatenate([p["lp"] for p in parts])
    acc = {k: float(np.mean([p["acc"][k] for p in parts])) for k in parts[0]["acc"]}
    chain_idx = np.repeat(np.arange(mcmc.n_chains), mcmc.n_draws)
    names = ["nu2", "rho", "sigma_extra"]
    chain = SampleChain(H, names, lp, np.array([acc["nu2"], acc["rho"], acc["sigma"]]), chain_idx,
                        extra={"age_acceptance": acc["ages"]})
    attach_rhat(chain)
    lev = [np.vstack([p["lev"][i] for p in parts]) for i in range(3)]
    rat = [np.vstack([p["rate"][i] for p in parts]) for i in range(3)]
    return IgpFit(chain, _mixture(grid, *lev, "level"), _mixture(grid, *rat, "rate"), T, t0, grid)


def prior_draws(spec: IgpSpec, grid, t0: float, n: int, rng: np.random.Generator, nu2=None, rho=None,
                with_intercept: bool = False) -> np.ndarray:
    """Level draws from the prior (rows are draws)."""
    grid = np.asarray(grid, dtype=float)
    k = spec.rate_kernel
    prior = _Prior(spec, k.s2 if nu2 is None else nu2, k.rho if rho is None else rho, t0,
                   spec.priors.alpha_sd**2 if with_intercept else 0.0)
    C = prior.level(grid, grid)
    L, _ = K.cholesky(0.5 * (C + C.T))
    return (L @ rng.standard_normal((grid.size, n))).T


__all__ = [
    "IgpPriors",
    "IgpSpec",
    "IgpFit",
    "integrated_cov",
    "cross_cov",
    "length_scale",
    "fit_eiv_igp",
    "prior_draws",
    "default_grid",
]
