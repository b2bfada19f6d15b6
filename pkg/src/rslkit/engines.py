"""Likelihood maximisation and adaptive Metropolis-within-Gibbs sampling.

Both engines work in transformed coordinates: ``log`` for positive
parameters, identity otherwise.  Bounds are enforced in that space.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import ConfigurationError, DivergenceError, NumericError, OptimizationError

RHAT_WARN = 1.05
TARGET_ACCEPT = 0.44
MAX_NONFINITE = 1000
POLISH_SIMPLEX = 0.02  # edge length, in transformed units, of the re-start simplex


@dataclass(frozen=True)
class BoundedParam:
    name: str
    lower: float
    upper: float
    transform: str = "log"
    initial: float | None = None

    def __post_init__(self):
        if self.transform not in ("log", "identity"):
            raise ConfigurationError(f"{self.name}: unknown transform {self.transform!r}")
        if not self.lower < self.upper:
            raise ConfigurationError(f"{self.name}: lower bound must be below upper bound")
        if self.transform == "log" and not self.lower > 0:
            raise ConfigurationError(f"{self.name}: log transform needs lower > 0")
        if self.initial is not None and not (self.lower <= self.initial <= self.upper):
            raise ConfigurationError(f"{self.name}: initial value outside bounds")

    def to_z(self, x):
        return np.log(x) if self.transform == "log" else np.asarray(x, dtype=float)

    def from_z(self, z):
        return np.exp(z) if self.transform == "log" else np.asarray(z, dtype=float)

    @property
    def z_bounds(self) -> tuple[float, float]:
        return float(self.to_z(self.lower)), float(self.to_z(self.upper))

    def z_center(self) -> float:
        if self.initial is not None:
            return float(self.to_z(self.initial))
        lo, hi = self.z_bounds
        if math.isfinite(lo) and math.isfinite(hi):
            return 0.5 * (lo + hi)
        if math.isfinite(lo):
            return lo + 1.0
        if math.isfinite(hi):
            return hi - 1.0
        return 0.0


class _Transformed:
    def __init__(self, params: Sequence[BoundedParam]):
        self.params = list(params)
        b = np.array([p.z_bounds for p in self.params], dtype=float).reshape(-1, 2)
        self.lo, self.hi = b[:, 0], b[:, 1]
        self.is_log = np.array([p.transform == "log" for p in self.params])

    def x(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(self.is_log, np.exp(np.where(self.is_log, z, 0.0)), z)

    def inside(self, z):
        return bool(np.all(z >= self.lo) and np.all(z <= self.hi))

    def clip(self, z):
        return np.clip(z, self.lo, self.hi)

    def center(self):
        return np.array([p.z_center() for p in self.params])

    def uniform(self, rng):
        lo = np.where(np.isfinite(self.lo), self.lo, self.center() - 3.0)
        hi = np.where(np.isfinite(self.hi), self.hi, self.center() + 3.0)
        return rng.uniform(lo, hi)


# ---------------------------------------------------------------------------
# maximisation


def _simplex(z, size, tr):
    """Right-angled simplex at ``z``, edges pointing inward from any bound."""
    d = z.size
    pts = np.tile(z, (d + 1, 1))
    for i in range(d):
        step = size if z[i] + size <= tr.hi[i] else -size
        pts[i + 1, i] += step
    return tr.clip(pts)


@dataclass
class Optimum:
    """Best point found.  Iterates as ``(theta, value)``."""

    theta: dict
    value: float
    x: np.ndarray
    start_values: list
    nfev: int

    def __iter__(self):
        yield self.theta
        yield self.value


def maximize(
    objective: Callable[[np.ndarray], float],
    params: Sequence[BoundedParam],
    restarts: int = 4,
    seed: int | None = 0,
    xatol: float = 1e-8,
    fatol: float = 1e-10,
    maxiter: int | None = None,
) -> Optimum:
    """Multi-start bounded Nelder–Mead maximisation.

    The first start is each parameter's ``initial`` value (or the centre of
    its transformed range); further starts are uniform in the transformed box
    from a generator seeded with ``seed``, so the start sequence for ``k``
    restarts is a prefix of that for ``k + 1``.  Each run is polished once
    from a small simplex around its own optimum.

    Parameters
    ----------
    objective
        Maps a vector of natural-scale parameter values to a log-likelihood.
        Non-finite values are treated as infeasible.
    restarts
        Total number of starting points (at least 1).
    """
    tr = _Transformed(params)
    if len(tr.params) == 0:
        v = float(objective(np.zeros(0)))
        if not math.isfinite(v):
            raise OptimizationError("objective is not finite")
        return Optimum({}, v, np.zeros(0), [v], 1)
    rng = np.random.default_rng(seed)
    n_starts = max(1, int(restarts))
    starts = [tr.center()] + [tr.uniform(rng) for _ in range(n_starts - 1)]
    nfev = 0

    def neg(z):
        nonlocal nfev
        nfev += 1
        z = tr.clip(z)
        try:
            v = float(objective(tr.x(z)))
        except (ArithmeticError, np.linalg.LinAlgError):
            return np.inf
        except NumericError:
            return np.inf
        return -v if math.isfinite(v) else np.inf

    d = len(tr.params)
    opts = {"xatol": xatol, "fatol": fatol, "maxiter": maxiter or 400 * d, "maxfev": maxiter or 800 * d}
    bounds = list(zip(tr.lo, tr.hi))
    best_z, best_v, start_vals = None, np.inf, []
    for z0 in starts:
        v0 = neg(z0)
        start_vals.append(-v0)
        if not math.isfinite(v0):
            continue
        z, v = z0, v0
        for simplex in (None, POLISH_SIMPLEX):
            o = dict(opts)
            if simplex is not None:
                o["initial_simplex"] = _simplex(z, simplex, tr)
            res = optimize.minimize(neg, z, method="Nelder-Mead", bounds=bounds, options=o)
            if res.fun <= v:
                z, v = tr.clip(res.x), float(res.fun)
        if v < best_v:
            best_z, best_v = z, v
    if best_z is None:
        raise OptimizationError("objective was non-finite at every starting point")
    x = tr.x(best_z)
    theta = {p.name: float(xi) for p, xi in zip(tr.params, x)}
    return Optimum(theta, -best_v, x, start_vals, nfev)


# ---------------------------------------------------------------------------
# MCMC


class AdaptiveStep:
    """Robbins–Monro log-scale adaptation toward a target acceptance rate.

    Adaptation gain decays as ``n**-0.6``; call :meth:`freeze` after burn-in.
    """

    def __init__(self, scale: float, target: float = TARGET_ACCEPT):
        self.log_scale = math.log(scale)
        self.target = target
        self.n = 0
        self.frozen = False

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def update(self, accept_prob: float):
        if self.frozen:
            return
        self.n += 1
        self.log_scale += min(1.0, self.n ** -0.6) * (accept_prob - self.target)

    def freeze(self):
        self.frozen = True


def gelman_rubin(chains: np.ndarray) -> np.ndarray:
    """Potential scale reduction per parameter for draws shaped (m, n, p)."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape[:2]
    if m < 2 or n < 2:
        return np.full(chains.shape[2:], np.nan)
    means = chains.mean(axis=1)
    W = chains.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var / W)
    return np.where(W > 0, r, 1.0)


@dataclass
class SampleChain:
    """Pooled post-burn draws from one or more chains.

    ``draws`` stacks chains in order; ``chain`` gives each row's chain index.
    """

    draws: np.ndarray
    names: list
    log_posterior: np.ndarray
    acceptance_rate: np.ndarray
    chain: np.ndarray
    rhat: dict = field(default_factory=dict)
    step: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    @property
    def n_chains(self) -> int:
        return int(self.chain.max()) + 1 if self.chain.size else 0

    def by_chain(self) -> np.ndarray:
        m = self.n_chains
        return self.draws.reshape(m, -1, self.draws.shape[1])

    def summary(self) -> dict:
        out = {}
        for i, name in enumerate(self.names):
            col = self.draws[:, i]
            q = np.percentile(col, [2.5, 50, 97.5])
            out[name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                         "p2.5": float(q[0]), "p50": float(q[1]), "p97.5": float(q[2])}
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw", *self.names, "log_posterior"])
            counts = {}
            for c, row, lp in zip(self.chain, self.draws, self.log_posterior):
                k = counts.get(int(c), 0)
                counts[int(c)] = k + 1
                w.writerow([int(c), k, *(f"{v:.17g}" for v in row), f"{lp:.17g}"])


def attach_rhat(chain: SampleChain, warn: bool = True) -> SampleChain:
    if chain.n_chains >= 2:
        r = gelman_rubin(chain.by_chain())
        chain.rhat = {n: float(v) for n, v in zip(chain.names, r)}
        bad = [n for n, v in chain.rhat.items() if v > RHAT_WARN]
        if bad and warn:
            warnings.warn(f"potential scale reduction above {RHAT_WARN} for {bad}", RuntimeWarning, stacklevel=3)
    return chain


def _run_chain(logp_z, tr: _Transformed, z0, n_draws, n_burn, rng, step0, thin):
    d = z0.size
    z = z0.copy()
    lp = logp_z(z)
    if not math.isfinite(lp):
        raise DivergenceError("log-posterior is not finite at the initial point")
    steps = [AdaptiveStep(s) for s in step0]
    acc = np.zeros(d)
    draws = np.empty((n_draws, d))
    lps = np.empty(n_draws)
    bad = 0
    total = n_burn + n_draws * thin
    kept = 0
    for it in range(total):
        if it == n_burn:
            for s in steps:
                s.freeze()
        for i in range(d):
            prop = z.copy()
            prop[i] += steps[i].scale * rng.standard_normal()
            if prop[i] < tr.lo[i] or prop[i] > tr.hi[i]:
                lp_new = -np.inf
            else:
                lp_new = logp_z(prop)
            if math.isfinite(lp_new):
                bad = 0
                a = 1.0 if lp_new >= lp else math.exp(lp_new - lp)
            else:
                bad += 1
                if bad >= MAX_NONFINITE:
                    raise DivergenceError(f"{MAX_NONFINITE} consecutive non-finite proposals")
                a = 0.0
            if rng.random() < a:
                z, lp = prop, lp_new
                if it >= n_burn:
                    acc[i] += 1
            steps[i].update(a)
        if it >= n_burn and (it - n_burn) % thin == 0:
            draws[kept] = tr.x(z)
            lps[kept] = lp
            kept += 1
    return draws, lps, acc / max(1, n_draws * thin), np.array([s.scale for s in steps])


def sample(
    log_posterior: Callable[[np.ndarray], float],
    params: Sequence[BoundedParam],
    n_draws: int = 1000,
    n_burn: int = 1000,
    n_chains: int = 2,
    seed: int | None = 0,
    init: Sequence[float] | None = None,
    thin: int = 1,
    step: Sequence[float] | None = None,
) -> SampleChain:
    """Adaptive random-walk Metropolis, one scalar block per parameter.

    Step sizes adapt during burn-in toward 0.44 acceptance and are then
    frozen.  Log-transformed parameters include the Jacobian term.  Each
    chain draws from its own child of ``SeedSequence(seed)``.
    """
    tr = _Transformed(params)
    d = len(tr.params)

    def logp_z(z):
        try:
            v = float(log_posterior(tr.x(z)))
        except (ArithmeticError, np.linalg.LinAlgError, NumericError):
            return np.nan
        if math.isnan(v):
            return v
        return v + float(np.sum(z[tr.is_log]))

    z_init = tr.center() if init is None else np.array([float(p.to_z(v)) for p, v in zip(tr.params, init)])
    width = np.where(np.isfinite(tr.hi - tr.lo), tr.hi - tr.lo, 10.0)
    step0 = np.asarray(step, dtype=float) if step is not None else 0.1 * width
    children = np.random.SeedSequence(seed).spawn(n_chains)
    all_d, all_lp, all_acc, all_c, all_step = [], [], [], [], []
    for c, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        z0 = z_init.copy()
        if c > 0:
            cand = tr.clip(z_init + 0.05 * width * rng.standard_normal(d))
            if math.isfinite(logp_z(cand)):
                z0 = cand
        dr, lp, acc, st = _run_chain(logp_z, tr, z0, n_draws, n_burn, rng, step0, thin)
        all_d.append(dr)
        all_lp.append(lp)
        all_acc.append(acc)
        all_c.append(np.full(n_draws, c))
        all_step.append(st)
    chain = SampleChain(
        draws=np.vstack(all_d),
        names=[p.name for p in tr.params],
        log_posterior=np.concatenate(all_lp),
        acceptance_rate=np.mean(all_acc, axis=0),
        chain=np.concatenate(all_c),
        step=np.mean(all_step, axis=0),
    )
    return attach_rhat(chain)


__all__ = [
    "BoundedParam",
    "Optimum",
    "maximize",
    "AdaptiveStep",
    "SampleChain",
    "sample",
    "gelman_rubin",
    "attach_rhat",
]
