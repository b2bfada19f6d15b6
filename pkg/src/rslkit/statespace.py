"""Linear-Gaussian state-space smoothing over fingerprint-structured states.

A model advances the state with ``x_k = Φ x_{k-1} + B u_k + w_k`` and
observes ``z_k = H x_k + v_k``, where missing entries of ``z_k`` are NaN.
Smoothing combines a forward Kalman filter with a backward information
filter; several candidate models are averaged by their data likelihoods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import ConfigurationError, DegeneracyError, NumericError, SmootherInstabilityError

PSD_TOL = 1e-10


@dataclass(frozen=True)
class StateLayout:
    """Names of the state entries.

    Local RSL states come first, then one melt rate per source, then an
    optional cumulative GMSL state.
    """

    sites: tuple
    sources: tuple
    has_gmsl: bool = True

    @property
    def n_state(self) -> int:
        return len(self.sites) + len(self.sources) + int(self.has_gmsl)

    @property
    def site_slice(self) -> slice:
        return slice(0, len(self.sites))

    @property
    def rate_slice(self) -> slice:
        a = len(self.sites)
        return slice(a, a + len(self.sources))

    @property
    def gmsl_index(self) -> int | None:
        return self.n_state - 1 if self.has_gmsl else None


@dataclass(frozen=True)
class StateSpaceModel:
    """Time-invariant dynamics with per-step control inputs.

    ``u`` has one row per step; row ``k`` drives the move from step k-1 to
    k, so row 0 is ignored.  ``x0, P0`` are the prior at step 0.
    """

    Phi: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    P0: np.ndarray
    B: np.ndarray | None = None
    u: np.ndarray | None = None
    layout: StateLayout | None = None
    name: str = ""

    def __post_init__(self):
        for f in ("Phi", "Q", "H", "R", "x0", "P0"):
            object.__setattr__(self, f, np.ascontiguousarray(getattr(self, f), dtype=float))
        n = self.x0.size
        m = self.H.shape[0] if self.H.ndim == 2 else -1
        if self.Phi.shape != (n, n) or self.Q.shape != (n, n) or self.P0.shape != (n, n):
            raise ConfigurationError(f"Phi, Q and P0 must be {n}x{n} to match x0")
        if self.H.ndim != 2 or self.H.shape[1] != n:
            raise ConfigurationError(f"H must have {n} columns")
        if self.R.shape != (m, m):
            raise ConfigurationError(f"R must be {m}x{m} to match H")
        for f in ("Q", "R", "P0"):
            _check_psd(getattr(self, f), f)
        if self.B is not None or self.u is not None:
            if self.B is None or self.u is None:
                raise ConfigurationError("B and u must be given together")
            B = np.asarray(self.B, dtype=float)
            u = np.asarray(self.u, dtype=float)
            if B.ndim != 2 or B.shape[0] != n or u.ndim != 2 or u.shape[1] != B.shape[1]:
                raise ConfigurationError("B must be n x p and u must be steps x p")
            object.__setattr__(self, "B", B)
            object.__setattr__(self, "u", u)
        if self.layout is not None and self.layout.n_state != n:
            raise ConfigurationError("layout size does not match the state dimension")

    @property
    def n_state(self) -> int:
        return self.x0.size

    @property
    def n_obs(self) -> int:
        return self.H.shape[0]

    def controls(self, n_steps: int) -> np.ndarray:
        if self.u is None:
            return np.zeros((n_steps, self.n_state))
        if self.u.shape[0] != n_steps:
            raise ConfigurationError(f"control series has {self.u.shape[0]} rows for {n_steps} steps")
        return np.ascontiguousarray(self.u @ self.B.T)


def _check_psd(A, name):
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-14 * max(1.0, float(np.abs(A).max(initial=0.0)))):
        raise ConfigurationError(f"{name} must be symmetric")
    if A.size and np.linalg.eigvalsh(A).min() < -1e-10 * max(1.0, float(np.abs(A).max())):
        raise ConfigurationError(f"{name} must be positive semi-definite")


def _obs_array(m: StateSpaceModel, obs) -> np.ndarray:
    Z = np.ascontiguousarray(np.asarray(obs, dtype=float))
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] != m.n_obs:
        raise ConfigurationError(f"observations have {Z.shape[1]} columns, H has {m.n_obs} rows")
    if Z.shape[0] < 1:
        raise ConfigurationError("need at least one step")
    return Z


@dataclass
class FilterResult:
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    step_loglik: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.step_loglik.sum())


@dataclass
class SmootherResult:
    """Smoothed moments per step; ``weights`` are per-model posterior weights."""

    mean: np.ndarray
    cov: np.ndarray
    weights: np.ndarray
    loglik: np.ndarray
    filtered: list = field(default_factory=list)
    layout: StateLayout | None = None
    members: list = field(default_factory=list)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.einsum("kii->ki", self.cov), 0.0, None))

    def gmsl(self):
        if self.layout is None:
            raise ConfigurationError("result carries no state layout")
        return gmsl_from_state(self, self.layout)


def kalman_filter(m: StateSpaceModel, obs, backend: str | None = None) -> FilterResult:
    """Forward Kalman filter; steps without data only run the time update."""
    Z = _obs_array(m, obs)
    fwd = _backend.get("kalman_forward", backend)
    xp, Pp, xf, Pf, ll, fail = fwd(m.Phi, m.controls(Z.shape[0]), m.Q, m.H, m.R, Z, m.x0, m.P0)
    if fail >= 0:
        raise NumericError(f"innovation covariance is not positive definite at step {fail}")
    return FilterResult(np.asarray(xp), np.asarray(Pp), np.asarray(xf), np.asarray(Pf), np.asarray(ll))


def _combine(xf, Pf, S, s):
    """Merge forward moments with backward information at every step."""
    n = xf.shape[1]
    A = np.eye(n) + S @ Pf
    # P = Pf (I + S Pf)^-1, solved as (I + S Pf)ᵀ Pᵀ = Pfᵀ
    Ps = np.swapaxes(np.linalg.solve(np.swapaxes(A, 1, 2), np.swapaxes(Pf, 1, 2)), 1, 2)
    Ps = 0.5 * (Ps + np.swapaxes(Ps, 1, 2))
    r = s - np.einsum("kij,kj->ki", S, xf)
    xs = xf + np.einsum("kij,kj->ki", Ps, r)
    return xs, Ps


def _unstable_steps(Pf, Ps):
    """Steps whose smoothed variances are non-finite, negative, or above the filtered ones."""
    vf = np.einsum("kii->ki", Pf)
    vs = np.einsum("kii->ki", Ps)
    tol = 1e-8 * np.maximum(1.0, np.abs(vf).max(axis=1, keepdims=True))
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(vs) | (vs < -tol) | (vs > vf + tol)
    return np.flatnonzero(bad.any(axis=1)).tolist()


def kalman_smooth(m: StateSpaceModel, obs, backend: str | None = None) -> SmootherResult:
    """Forward filter, backward information filter, and their combination.

    Raises
    ------
    SmootherInstabilityError
        If the backward pass breaks down or the combined variances are
        invalid (negative, or above the filtered ones), with the affected steps.
    """
    Z = _obs_array(m, obs)
    f = kalman_filter(m, Z, backend)
    bwd = _backend.get("information_backward", backend)
    S, s, fail = bwd(m.Phi, m.controls(Z.shape[0]), m.Q, m.H, m.R, Z)
    if fail >= 0:
        raise SmootherInstabilityError(f"backward pass failed at step {fail}", (fail, fail))
    S, s = np.asarray(S), np.asarray(s)
    xs, Ps = _combine(f.mean, f.cov, S, s)
    bad = _unstable_steps(f.cov, Ps)
    if bad:
        rng = (bad[0], bad[-1])
        raise SmootherInstabilityError(f"backward smoothing unstable over steps {rng[0]}..{rng[1]}", rng)
    return SmootherResult(xs, Ps, np.ones(1), np.array([f.loglik]), [f], m.layout, [])


def model_weights(logliks) -> np.ndarray:
    ll = np.asarray(logliks, dtype=float)
    if not np.any(np.isfinite(ll)):
        raise DegeneracyError("every model has zero likelihood")
    top = ll[np.isfinite(ll)].max()
    w = np.where(np.isfinite(ll), np.exp(ll - top), 0.0)
    return w / w.sum()


def multi_model_smooth(models, obs, backend: str | None = None) -> SmootherResult:
    """Likelihood-weighted mixture of per-model smoothers."""
    models = list(models)
    if not models:
        raise ConfigurationError("need at least one model")
    n = models[0].n_state
    if any(mm.n_state != n for mm in models):
        raise ConfigurationError("all models must share the state layout")
    res = []
    for mm in models:
        try:
            res.append(kalman_smooth(mm, obs, backend))
        except NumericError as e:
            if isinstance(e, SmootherInstabilityError):
                raise
            res.append(None)
    ll = np.array([-math.inf if r is None else float(r.loglik[0]) for r in res])
    w = model_weights(ll)
    live = [(wi, r) for wi, r in zip(w, res) if r is not None and wi > 0]
    mean = sum(wi * r.mean for wi, r in live)
    cov = np.zeros_like(live[0][1].cov)
    for wi, r in live:
        d = r.mean - mean
        cov += wi * (r.cov + np.einsum("ki,kj->kij", d, d))
    return SmootherResult(mean, 0.5 * (cov + np.swapaxes(cov, 1, 2)), w, ll,
                          [r.filtered[0] if r else None for r in res], models[0].layout, res)


@dataclass
class GmslSeries:
    mean: np.ndarray
    sd: np.ndarray

    def __iter__(self):
        yield self.mean
        yield self.sd


def gmsl_from_state(res: SmootherResult, layout: StateLayout, dt: float = 1.0) -> GmslSeries:
    """Global-mean sea level implied by the melt-rate block.

    With a cumulative GMSL state in the layout its smoothed moments are
    returned directly.  Otherwise the per-step rates are summed and
    integrated with ``dt``; the variance then ignores correlation between
    steps, so it is only indicative.
    """
    if not layout.sources:
        raise ConfigurationError("layout has no melt-rate block")
    if layout.has_gmsl:
        i = layout.gmsl_index
        return GmslSeries(res.mean[:, i].copy(), np.sqrt(np.clip(res.cov[:, i, i], 0.0, None)))
    sl = layout.rate_slice
    rate = res.mean[:, sl].sum(axis=1)
    var = res.cov[:, sl, sl].sum(axis=(1, 2))
    mean = np.concatenate([[0.0], np.cumsum(rate[:-1] * dt)])
    v = np.concatenate([[0.0], np.cumsum(var[:-1] * dt * dt)])
    return GmslSeries(mean, np.sqrt(v))


def fingerprint_model(fingerprints, dt: float = 1.0, q_local: float = 1e-6, q_rate: float = 1e-8,
                      r: float = 1e-4, gia=None, dsl=None, x0=None, P0=None, sites=None, sources=None,
                      n_steps: int | None = None, name: str = "") -> StateSpaceModel:
    """Build the fingerprint-structured random-walk model.

    Each site's RSL moves by ``dt·Σⱼ FPⱼ(site)·βⱼ`` plus its GIA rate times
    ``dt`` plus the dynamic sea-level increment, with per-site process noise
    ``q_local``.  Melt rates βⱼ follow random walks with variance ``q_rate``
    per step, and the GMSL state accumulates ``dt·Σⱼ βⱼ``.

    Parameters
    ----------
    fingerprints
        Array (sites × sources) of normalised fingerprints.
    gia
        Per-site GIA rate (m/yr), constant in time.
    dsl
        Per-step dynamic sea-level increments (steps × sites).
    """
    F = np.atleast_2d(np.asarray(fingerprints, dtype=float))
    ns, nj = F.shape
    sites = tuple(sites) if sites is not None else tuple(f"site{i}" for i in range(ns))
    sources = tuple(sources) if sources is not None else tuple(f"source{j}" for j in range(nj))
    if len(sites) != ns or len(sources) != nj:
        raise ConfigurationError("site/source names do not match the fingerprint shape")
    layout = StateLayout(sites, sources, True)
    n = layout.n_state
    Phi = np.eye(n)
    Phi[:ns, ns:ns + nj] = dt * F
    Phi[n - 1, ns:ns + nj] = dt
    Q = np.zeros((n, n))
    Q[:ns, :ns] = q_local * np.eye(ns)
    Q[ns:ns + nj, ns:ns + nj] = q_rate * np.eye(nj)
    H = np.zeros((ns, n))
    H[:, :ns] = np.eye(ns)
    R = r * np.eye(ns)
    B = u = None
    if gia is not None or dsl is not None:
        if n_steps is None:
            if dsl is None:
                raise ConfigurationError("n_steps is required when only GIA controls are given")
            n_steps = np.asarray(dsl).shape[0]
        u = np.zeros((n_steps, ns))
        if gia is not None:
            u += dt * np.asarray(gia, dtype=float)[None, :]
        if dsl is not None:
            dsl = np.asarray(dsl, dtype=float)
            if dsl.shape != (n_steps, ns):
                raise ConfigurationError("dsl must be steps x sites")
            u += dsl
        B = np.zeros((n, ns))
        B[:ns, :ns] = np.eye(ns)
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    if P0 is None:
        P0 = np.eye(n)
        P0[n - 1, n - 1] = 0.0
    return StateSpaceModel(Phi, Q, H, R, x0, P0, B, u, layout, name)


def random_walk_model(q: float, r: float, x0: float = 0.0, p0: float = 1.0, name: str = "") -> StateSpaceModel:
    """Scalar random walk observed with white noise."""
    return StateSpaceModel(np.eye(1), np.array([[q]]), np.eye(1), np.array([[r]]), np.array([x0]),
                           np.array([[p0]]), name=name)


def simulate(m: StateSpaceModel, n_steps: int, rng: np.random.Generator, missing: float = 0.0):
    """Draw a state path and observations (NaN where missing)."""
    n = m.n_state
    Bu = m.controls(n_steps)
    LQ = _psd_root(m.Q)
    LR = _psd_root(m.R)
    x = m.x0 + _psd_root(m.P0) @ rng.standard_normal(n)
    X = np.empty((n_steps, n))
    Z = np.empty((n_steps, m.n_obs))
    for k in range(n_steps):
        if k > 0:
            x = m.Phi @ x + Bu[k] + LQ @ rng.standard_normal(n)
        X[k] = x
        Z[k] = m.H @ x + LR @ rng.standard_normal(m.n_obs)
    if missing > 0:
        Z[rng.random(Z.shape) < missing] = np.nan
    return X, Z


def _psd_root(A):
    w, V = np.linalg.eigh(A)
    return V * np.sqrt(np.clip(w, 0.0, None))


__all__ = [
    "StateLayout",
    "StateSpaceModel",
    "FilterResult",
    "SmootherResult",
    "GmslSeries",
    "kalman_filter",
    "kalman_smooth",
    "multi_model_smooth",
    "model_weights",
    "gmsl_from_state",
    "fingerprint_model",
    "random_walk_model",
    "simulate",
]
