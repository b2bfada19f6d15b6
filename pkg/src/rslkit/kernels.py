"""Covariance functions, kernel algebra and a textual kernel grammar.

Kernels are immutable expression trees.  Primitives act on time separation
(years) unless wrapped as the spatial half of :class:`SeparableSpaceTime`,
where stationary primitives are applied to great-circle separation in
degrees of arc.

Hyperparameters are addressed by dotted names ``"<label>.<field>"``; the label
is the node's ``name`` when given, else ``<kind><index>`` with the index
counting primitives in pre-order.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy import linalg

from . import _backend
from .errors import ConfigurationError, NumericError

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)


# ---------------------------------------------------------------------------
# points


@dataclass(frozen=True)
class Point:
    """A single space-time location; ``lat``/``lon`` optional."""

    t: float
    lat: float | None = None
    lon: float | None = None
    site: str | None = None


class Points:
    """Structure-of-arrays point set with a small cache of pairwise geometry."""

    __slots__ = ("t", "lat", "lon", "site", "_cache")
    _CACHE_MAX = 8

    def __init__(self, t, lat=None, lon=None, site=None):
        self.t = np.atleast_1d(np.asarray(t, dtype=float))
        n = self.t.size
        if (lat is None) != (lon is None):
            raise ConfigurationError("latitude and longitude must be given together")
        self.lat = None if lat is None else np.broadcast_to(np.asarray(lat, dtype=float), (n,)).copy()
        self.lon = None if lon is None else np.broadcast_to(np.asarray(lon, dtype=float), (n,)).copy()
        self.site = None if site is None else np.broadcast_to(np.asarray(site, dtype=object), (n,)).copy()
        self._cache = {}

    @classmethod
    def from_dataset(cls, d, t=None) -> "Points":
        return cls(d.t if t is None else t, d.lat, d.lon, np.array(d.site_ids, dtype=object))

    @classmethod
    def of(cls, p) -> "Points":
        if isinstance(p, Points):
            return p
        if isinstance(p, Point):
            lat = None if p.lat is None else [p.lat]
            lon = None if p.lon is None else [p.lon]
            return cls([p.t], lat, lon, None if p.site is None else [p.site])
        return cls(p)

    def __len__(self):
        return self.t.size

    @property
    def has_location(self) -> bool:
        return self.lat is not None

    def take(self, idx) -> "Points":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Points(self.t[idx], pick(self.lat), pick(self.lon), pick(self.site))

    def with_times(self, t) -> "Points":
        return Points(t, self.lat, self.lon, self.site)

    def _memo(self, other, key, fn):
        k = (id(other), key)
        hit = self._cache.get(k)
        if hit is not None and hit[0] is other:
            return hit[1]
        val = fn()
        if len(self._cache) >= self._CACHE_MAX:
            self._cache.pop(next(iter(self._cache)))
        self._cache[k] = (other, val)
        return val

    def dt(self, other: "Points") -> np.ndarray:
        return self._memo(other, "dt", lambda: _backend.abs_diff(self.t, other.t))

    def signed_dt(self, other: "Points") -> np.ndarray:
        return self._memo(other, "sdt", lambda: self.t[:, None] - other.t[None, :])

    def dist(self, other: "Points") -> np.ndarray:
        if not (self.has_location and other.has_location):
            raise ConfigurationError("spatial kernel evaluated on points without locations")
        return self._memo(other, "ang", lambda: _backend.angular_distance(self.lat, self.lon, other.lat, other.lon))

    def same(self, other: "Points") -> np.ndarray:
        eq = self.signed_dt(other) == 0.0
        if self.has_location and other.has_location:
            eq = eq & (self.lat[:, None] == other.lat[None, :]) & (self.lon[:, None] == other.lon[None, :])
        return eq


# ---------------------------------------------------------------------------
# base class


class Kernel:
    """Base class; subclasses are frozen dataclasses."""

    kind = "kernel"
    hyper: tuple[str, ...] = ()
    positive: tuple[str, ...] = ()

    # -- evaluation ---------------------------------------------------------
    def cov(self, X1: Points, X2: Points) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, X1, X2=None):
        X1 = Points.of(X1)
        X2 = X1 if X2 is None else Points.of(X2)
        return self.cov(X1, X2)

    def gram(self, X) -> np.ndarray:
        X = Points.of(X)
        self.check()
        K = self.cov(X, X)
        return 0.5 * (K + K.T)

    def diag(self, X) -> np.ndarray:
        X = Points.of(X)
        return np.array([self.cov(X.take([i]), X.take([i]))[0, 0] for i in range(len(X))])

    def d_dt1(self, X1: Points, X2: Points):
        """∂k(x1, x2)/∂t1, or ``None`` when no analytic form is coded."""
        return None

    # -- structure ----------------------------------------------------------
    def children(self) -> tuple["Kernel", ...]:
        return ()

    def primitives(self) -> list["Kernel"]:
        out = []
        stack = [self]
        while stack:
            k = stack.pop()
            ch = k.children()
            if ch:
                stack.extend(reversed(ch))
            else:
                out.append(k)
        return out

    def without_white(self) -> "Kernel":
        return self

    @property
    def is_white(self) -> bool:
        return False

    def check(self):
        for p in self.primitives():
            p._check_own()

    def _check_own(self):
        for f in self.hyper:
            v = getattr(self, f)
            if not math.isfinite(v):
                raise NumericError(f"{self.kind}: non-finite parameter {f}={v}")
        for f in self.positive:
            if getattr(self, f) <= 0:
                raise ConfigurationError(f"{self.kind}: {f} must be > 0")
        for f in ("s2", "c", "q"):
            if f in self.hyper and getattr(self, f) < 0:
                raise ConfigurationError(f"{self.kind}: {f} must be >= 0")

    # -- parameters ---------------------------------------------------------
    def _labels(self) -> list[str]:
        labels = []
        for i, p in enumerate(self.primitives()):
            labels.append(getattr(p, "name", None) or f"{p.kind}{i}")
        return labels

    def hyperparameters(self) -> dict[str, float]:
        out = {}
        for label, p in zip(self._labels(), self.primitives()):
            for f in p.hyper:
                out[f"{label}.{f}"] = float(getattr(p, f))
        return out

    def with_values(self, values: Mapping[str, float]) -> "Kernel":
        """Return a copy with the named hyperparameters replaced."""
        known = self.hyperparameters()
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown hyperparameter(s): {sorted(unknown)}")
        labels = self._labels()
        counter = iter(range(len(labels)))

        def rebuild(k: Kernel) -> Kernel:
            ch = k.children()
            if ch:
                return k._replace_children(tuple(rebuild(c) for c in ch))
            label = labels[next(counter)]
            upd = {f: float(values[f"{label}.{f}"]) for f in k.hyper if f"{label}.{f}" in values}
            return dataclasses.replace(k, **upd) if upd else k

        return rebuild(self)

    def _replace_children(self, ch):
        raise NotImplementedError

    def to_str(self) -> str:
        raise NotImplementedError

    def __str__(self):
        return self.to_str()

    def __add__(self, other):
        return Sum((self, other))

    def __mul__(self, other):
        return Product((self, other))


def _fmt(v) -> str:
    return repr(float(v))


def _args(node, fields) -> str:
    parts = [f"{f}={_fmt(getattr(node, f))}" for f in fields]
    if getattr(node, "name", None):
        parts.append(f"name={node.name}")
    return ",".join(parts)


class Stationary(Kernel):
    """Primitive that is a function of separation only."""

    def fn(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dfn(self, r: np.ndarray):
        """(1/r)·dk/dr, so that ∂k/∂t1 = dfn(|Δ|)·Δ; ``None`` if not coded."""
        return None

    def cov(self, X1, X2):
        return self.fn(X1.dt(X2))

    def d_dt1(self, X1, X2):
        d = X1.signed_dt(X2)
        g = self.dfn(np.abs(d))
        return None if g is None else g * d

    def diag(self, X):
        return np.full(len(Points.of(X)), float(self.fn(np.zeros(1))[0]))


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Matern(Stationary):
    """Matérn covariance at half-integer order ``nu`` ∈ {0.5, 1.5, 2.5}."""

    s2: float = 1.0
    l: float = 1.0
    nu: float = 1.5
    name: str | None = None
    kind = "matern"
    hyper = ("s2", "l")
    positive = ("l",)

    def _check_own(self):
        super()._check_own()
        if self.nu not in (0.5, 1.5, 2.5):
            raise ConfigurationError(f"Matérn order must be 0.5, 1.5 or 2.5, got {self.nu}")

    def fn(self, r):
        return _backend.matern(r, float(self.s2), float(self.l), int(round(2 * self.nu)))

    def cov(self, X1, X2):
        if X1 is X2:
            return _backend.matern_sym(X1.dt(X1), float(self.s2), float(self.l), int(round(2 * self.nu)))
        return self.fn(X1.dt(X2))

    def dfn(self, r):
        if self.nu == 1.5:
            return -self.s2 * 3.0 / self.l**2 * np.exp(-SQRT3 * r / self.l)
        if self.nu == 2.5:
            a = SQRT5 * r / self.l
            return -self.s2 * 5.0 / (3.0 * self.l**2) * (1.0 + a) * np.exp(-a)
        return None

    def to_str(self):
        return f"matern({_args(self, ('s2', 'l', 'nu'))})"


@dataclass(frozen=True)
class SquaredExponential(Stationary):
    """σ²·exp(−r²/(2ℓ²))."""

    s2: float = 1.0
    l: float = 1.0
    name: str | None = None
    kind = "se"
    hyper = ("s2", "l")
    positive = ("l",)

    def fn(self, r):
        return self.s2 * np.exp(-0.5 * (np.asarray(r) / self.l) ** 2)

    def dfn(self, r):
        return -self.s2 / self.l**2 * np.exp(-0.5 * (r / self.l) ** 2)

    def to_str(self):
        return f"se({_args(self, ('s2', 'l'))})"


@dataclass(frozen=True)
class PoweredExponential(Stationary):
    """ν²·ρ^((r/unit)^κ) with ρ ∈ (0,1), κ ∈ (0,2]; ``s2`` holds ν²."""

    s2: float = 1.0
    rho: float = 0.5
    kappa: float = 2.0
    unit: float = 1.0
    name: str | None = None
    kind = "pexp"
    hyper = ("s2", "rho")
    positive = ("unit",)

    def _check_own(self):
        super()._check_own()
        if not (0.0 < self.rho < 1.0):
            raise ConfigurationError(f"pexp: rho must lie in (0,1), got {self.rho}")
        if not (0.0 < self.kappa <= 2.0):
            raise ConfigurationError(f"pexp: kappa must lie in (0,2], got {self.kappa}")

    def fn(self, r):
        return self.s2 * np.exp(math.log(self.rho) * (np.asarray(r) / self.unit) ** self.kappa)

    def dfn(self, r):
        if self.kappa == 2.0:
            return 2.0 * math.log(self.rho) / self.unit**2 * self.fn(r)
        if self.kappa > 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                x = r / self.unit
                g = self.fn(r) * math.log(self.rho) * self.kappa * x ** (self.kappa - 2.0) / self.unit**2
            return np.where(r > 0, g, 0.0)
        return None

    def to_str(self):
        return f"pexp({_args(self, ('s2', 'rho', 'kappa', 'unit'))})"


@dataclass(frozen=True)
class RationalQuadratic(Stationary):
    """c·(1 + r²/(2ατ²))^(−α)."""

    c: float = 1.0
    alpha: float = 1.0
    tau: float = 1.0
    name: str | None = None
    kind = "rq"
    hyper = ("c", "alpha", "tau")
    positive = ("alpha", "tau")

    def fn(self, r):
        r = np.asarray(r)
        return self.c * (1.0 + r * r / (2.0 * self.alpha * self.tau**2)) ** (-self.alpha)

    def dfn(self, r):
        base = 1.0 + r * r / (2.0 * self.alpha * self.tau**2)
        return -self.c / self.tau**2 * base ** (-self.alpha - 1.0)

    def to_str(self):
        return f"rq({_args(self, ('c', 'alpha', 'tau'))})"


@dataclass(frozen=True)
class Constant(Stationary):
    """c for every pair: a random offset shared by all points."""

    c: float = 1.0
    name: str | None = None
    kind = "const"
    hyper = ("c",)

    def fn(self, r):
        return np.full(np.shape(r), float(self.c))

    def dfn(self, r):
        return np.zeros(np.shape(r))

    def to_str(self):
        return f"const({_args(self, ('c',))})"


@dataclass(frozen=True)
class DotProduct(Kernel):
    """σ²·(t − t0)(t′ − t0): a random linear trend pinned at ``t0``."""

    s2: float = 1.0
    t0: float = 0.0
    name: str | None = None
    kind = "dot"
    hyper = ("s2",)

    def cov(self, X1, X2):
        return self.s2 * np.outer(X1.t - self.t0, X2.t - self.t0)

    def d_dt1(self, X1, X2):
        return self.s2 * np.broadcast_to(X2.t - self.t0, (len(X1), len(X2))).copy()

    def diag(self, X):
        X = Points.of(X)
        return self.s2 * (X.t - self.t0) ** 2

    def to_str(self):
        return f"dot({_args(self, ('s2', 't0'))})"


@dataclass(frozen=True)
class Brownian(Kernel):
    """q·max(0, min(t − t0, t′ − t0)): Wiener process started at ``t0``."""

    q: float = 1.0
    t0: float = 0.0
    name: str | None = None
    kind = "brownian"
    hyper = ("q",)

    def cov(self, X1, X2):
        a = X1.t[:, None] - self.t0
        b = X2.t[None, :] - self.t0
        return self.q * np.maximum(0.0, np.minimum(a, b))

    def diag(self, X):
        X = Points.of(X)
        return self.q * np.maximum(0.0, X.t - self.t0)

    def to_str(self):
        return f"brownian({_args(self, ('q', 't0'))})"


@dataclass(frozen=True)
class WhiteNoise(Kernel):
    """σ²·δ(x, x′).  ``gram`` is σ²·I; cross-covariance matches coordinates."""

    s2: float = 1.0
    name: str | None = None
    kind = "white"
    hyper = ("s2",)

    @property
    def is_white(self):
        return True

    def cov(self, X1, X2):
        if X1 is X2:
            return self.s2 * np.eye(len(X1))
        return self.s2 * X1.same(X2).astype(float)

    def d_dt1(self, X1, X2):
        return np.zeros((len(X1), len(X2)))

    def diag(self, X):
        return np.full(len(Points.of(X)), float(self.s2))

    def to_str(self):
        return f"white({_args(self, ('s2',))})"


@dataclass(frozen=True)
class SiteWeights(Kernel):
    """B(x)·B(x′) for a spatial weighting field.

    ``weights`` is either a mapping from site id to weight or a callable of
    ``(lat, lon)`` arrays.
    """

    weights: Mapping[str, float] | Callable = None
    name: str | None = None
    kind = "sites"
    hyper = ()

    def _b(self, X: Points) -> np.ndarray:
        w = self.weights
        if callable(w):
            if not X.has_location:
                raise ConfigurationError("fingerprint field needs point locations")
            b = np.asarray(w(X.lat, X.lon), dtype=float)
            if b.shape != X.t.shape or not np.all(np.isfinite(b)):
                raise ConfigurationError("fingerprint undefined at some points")
            return b
        if X.site is None:
            raise ConfigurationError("site-keyed fingerprint needs points with site ids")
        missing = sorted({s for s in X.site if s not in w})
        if missing:
            raise ConfigurationError(f"fingerprint missing at site(s): {missing}")
        return np.array([w[s] for s in X.site], dtype=float)

    def cov(self, X1, X2):
        return np.outer(self._b(X1), self._b(X2))

    def d_dt1(self, X1, X2):
        return np.zeros((len(X1), len(X2)))

    def diag(self, X):
        return self._b(Points.of(X)) ** 2

    def to_str(self):
        if callable(self.weights):
            raise ConfigurationError("callable fingerprints cannot be serialised")
        parts = [f"{k}={_fmt(v)}" for k, v in sorted(self.weights.items())]
        if self.name:
            parts.append(f"name={self.name}")
        return f"sites({','.join(parts)})"

    def __hash__(self):
        return id(self)


# ---------------------------------------------------------------------------
# combinators


@dataclass(frozen=True)
class Sum(Kernel):
    terms: tuple[Kernel, ...]
    kind = "sum"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ConfigurationError("sum() needs at least one term")

    def children(self):
        return self.terms

    def _replace_children(self, ch):
        return Sum(ch)

    def cov(self, X1, X2):
        out = self.terms[0].cov(X1, X2)
        for k in self.terms[1:]:
            out = out + k.cov(X1, X2)
        return out

    def diag(self, X):
        return sum(k.diag(X) for k in self.terms)

    def d_dt1(self, X1, X2):
        parts = [k.d_dt1(X1, X2) for k in self.terms]
        if any(p is None for p in parts):
            return None
        return sum(parts)

    def without_white(self):
        kept = [k.without_white() for k in self.terms if not k.is_white]
        if not kept:
            return Zero()
        return kept[0] if len(kept) == 1 else Sum(tuple(kept))

    @property
    def is_white(self):
        return all(k.is_white for k in self.terms)

    def to_str(self):
        return "sum(" + ",".join(k.to_str() for k in self.terms) + ")"


@dataclass(frozen=True)
class Product(Kernel):
    factors: tuple[Kernel, ...]
    kind = "prod"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ConfigurationError("prod() needs at least one factor")

    def children(self):
        return self.factors

    def _replace_children(self, ch):
        return Product(ch)

    def cov(self, X1, X2):
        out = self.factors[0].cov(X1, X2)
        for k in self.factors[1:]:
            out = out * k.cov(X1, X2)
        return out

    def diag(self, X):
        out = self.factors[0].diag(X)
        for k in self.factors[1:]:
            out = out * k.diag(X)
        return out

    def d_dt1(self, X1, X2):
        vals = [k.cov(X1, X2) for k in self.factors]
        ders = [k.d_dt1(X1, X2) for k in self.factors]
        if any(d is None for d in ders):
            return None
        total = np.zeros((len(X1), len(X2)))
        for i, d in enumerate(ders):
            term = d
            for j, v in enumerate(vals):
                if j != i:
                    term = term * v
            total = total + term
        return total

    @property
    def is_white(self):
        return any(k.is_white for k in self.factors)

    def without_white(self):
        return Zero() if self.is_white else self

    def to_str(self):
        return "prod(" + ",".join(k.to_str() for k in self.factors) + ")"


@dataclass(frozen=True)
class SeparableSpaceTime(Kernel):
    """k_time(t, t′)·k_space(angle(x, x′)); ``space`` must be stationary."""

    time: Kernel
    space: Stationary
    kind = "spacetime"

    def __post_init__(self):
        if not isinstance(self.space, Stationary):
            raise ConfigurationError("spatial part of spacetime() must be a stationary kernel")

    def children(self):
        return (self.time, self.space)

    def _replace_children(self, ch):
        return SeparableSpaceTime(ch[0], ch[1])

    def spatial(self, X1, X2):
        return self.space.fn(X1.dist(X2))

    def cov(self, X1, X2):
        return self.time.cov(X1, X2) * self.spatial(X1, X2)

    def diag(self, X):
        X = Points.of(X)
        if not X.has_location:
            raise ConfigurationError("spatial kernel evaluated on points without locations")
        return self.time.diag(X) * self.space.diag(X)

    def d_dt1(self, X1, X2):
        d = self.time.d_dt1(X1, X2)
        return None if d is None else d * self.spatial(X1, X2)

    @property
    def is_white(self):
        return self.time.is_white

    def without_white(self):
        return Zero() if self.is_white else self

    def to_str(self):
        return f"spacetime(time={self.time.to_str()},space={self.space.to_str()})"


@dataclass(frozen=True)
class Zero(Kernel):
    kind = "zero"

    def cov(self, X1, X2):
        return np.zeros((len(X1), len(X2)))

    def diag(self, X):
        return np.zeros(len(Points.of(X)))

    def d_dt1(self, X1, X2):
        return np.zeros((len(X1), len(X2)))

    def to_str(self):
        return "zero()"


# ---------------------------------------------------------------------------
# public helpers


def eval(k: Kernel, p, q) -> float:  # noqa: A001 - mirrors the documented operation name
    """Covariance between two single points."""
    P, Q = Points.of(p), Points.of(q)
    k.check()
    return float(k.cov(P, Q)[0, 0])


def gram(k: Kernel, points) -> np.ndarray:
    return k.gram(points)


def angular_distance(a, b) -> float:
    """Great-circle separation in degrees between (lat, lon) pairs."""
    return float(_backend.angular_distance([a[0]], [a[1]], [b[0]], [b[1]])[0, 0])


def melt_kernel(linear_sd, rq_amplitude, rq_roughness, rq_timescale, fingerprint, t0=0.0) -> Kernel:
    """[m_a²(t−t0)(t′−t0) + c(1 + Δt²/(2ατ²))^(−α)]·B(x)·B(x′).

    ``rq_amplitude`` is the multiplier ``c`` of the rational-quadratic term,
    entering the covariance linearly.
    """
    return Product(
        (
            Sum((DotProduct(s2=linear_sd**2, t0=t0, name="melt_lin"),
                 RationalQuadratic(c=rq_amplitude, alpha=rq_roughness, tau=rq_timescale, name="melt_rq"))),
            SiteWeights(fingerprint, name="fingerprint"),
        )
    )


# ---------------------------------------------------------------------------
# Cholesky with jitter escalation

JITTER = 1e-8
JITTER_DOUBLINGS = 4


def cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K`` and the jitter that was needed.

    A plain factorisation is tried first.  On failure ``1e-8·mean(diag)`` is
    added to the diagonal and doubled up to four times before giving up.
    """
    if not np.all(np.isfinite(K)):
        raise NumericError("covariance matrix has non-finite entries")
    try:
        return linalg.cholesky(K, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K)))
    if not scale > 0:
        scale = 1.0
    jit = JITTER * scale
    n = K.shape[0]
    for _ in range(JITTER_DOUBLINGS + 1):
        try:
            return linalg.cholesky(K + jit * np.eye(n), lower=True, check_finite=False), jit
        except linalg.LinAlgError:
            jit *= 2.0
    raise NumericError(f"Cholesky failed after jitter escalation to {jit / 2:.3g}")


# ---------------------------------------------------------------------------
# grammar

_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan)|(?P<id>[A-Za-z_][\w\-\.]*)|(?P<p>[(),=]))")


def _tokens(text):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ConfigurationError(f"kernel grammar: unexpected character at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


_PRIMS = {
    "matern": (Matern, ("s2", "l", "nu")),
    "se": (SquaredExponential, ("s2", "l")),
    "pexp": (PoweredExponential, ("s2", "rho", "kappa", "unit")),
    "rq": (RationalQuadratic, ("c", "alpha", "tau")),
    "dot": (DotProduct, ("s2", "t0")),
    "const": (Constant, ("c",)),
    "brownian": (Brownian, ("q", "t0")),
    "white": (WhiteNoise, ("s2",)),
}


class _Parser:
    def __init__(self, text):
        self.toks = _tokens(text)
        self.i = 0
        self.text = text

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, val=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (val and tok[1] != val):
            raise ConfigurationError(f"kernel grammar: expected {val or kind} near token {self.i} in {self.text!r}")
        self.i += 1
        return tok[1]

    def kernel(self) -> Kernel:
        head = self.take("id").lower()
        self.take("p", "(")
        pos, kw = [], {}
        if self.peek() != ("p", ")"):
            while True:
                if self.peek()[0] == "id" and self.i + 1 < len(self.toks) and self.toks[self.i + 1] == ("p", "="):
                    key = self.take("id")
                    self.take("p", "=")
                    if self.peek()[0] == "num":
                        kw[key] = float(self.take("num"))
                    elif self.i + 1 < len(self.toks) and self.toks[self.i + 1] == ("p", "("):
                        kw[key] = self.kernel()
                    else:
                        kw[key] = self.take("id")
                else:
                    pos.append(self.kernel())
                if self.peek() == ("p", ","):
                    self.take("p", ",")
                    continue
                break
        self.take("p", ")")
        return self.build(head, pos, kw)

    def build(self, head, pos, kw):
        if head in ("sum", "prod"):
            if kw or not pos:
                raise ConfigurationError(f"{head}() takes one or more kernel arguments")
            return (Sum if head == "sum" else Product)(tuple(pos))
        if head == "spacetime":
            if pos or set(kw) != {"time", "space"}:
                raise ConfigurationError("spacetime() takes time=<kernel>, space=<kernel>")
            return SeparableSpaceTime(kw["time"], kw["space"])
        if head == "zero":
            return Zero()
        if head == "sites":
            name = kw.pop("name", None)
            return SiteWeights({k: float(v) for k, v in kw.items()}, name=name)
        if head == "melt":
            fp = {k[3:]: float(v) for k, v in kw.items() if k.startswith("fp_")}
            return melt_kernel(kw.get("linear_sd", 0.0), kw.get("c", 0.0), kw.get("alpha", 1.0),
                               kw.get("tau", 1.0), fp, kw.get("t0", 0.0))
        if head not in _PRIMS:
            raise ConfigurationError(f"unknown kernel {head!r}")
        if pos:
            raise ConfigurationError(f"{head}() takes keyword arguments only")
        cls, allowed = _PRIMS[head]
        unknown = set(kw) - set(allowed) - {"name"}
        if unknown:
            raise ConfigurationError(f"{head}(): unknown argument(s) {sorted(unknown)}")
        for k, v in kw.items():
            if k != "name" and not isinstance(v, float):
                raise ConfigurationError(f"{head}(): {k} must be numeric")
        k = cls(**kw)
        k._check_own()
        return k


def parse(text: str) -> Kernel:
    """Parse a kernel expression such as ``sum(matern(s2=1,l=700,nu=1.5),white(s2=0.01))``."""
    p = _Parser(text)
    k = p.kernel()
    if p.i != len(p.toks):
        raise ConfigurationError(f"kernel grammar: trailing input in {text!r}")
    return k


def dumps(k: Kernel) -> str:
    return k.to_str()


__all__ = [
    "Point",
    "Points",
    "Kernel",
    "Stationary",
    "Matern",
    "SquaredExponential",
    "PoweredExponential",
    "RationalQuadratic",
    "Constant",
    "DotProduct",
    "Brownian",
    "WhiteNoise",
    "SiteWeights",
    "Sum",
    "Product",
    "SeparableSpaceTime",
    "Zero",
    "eval",
    "gram",
    "angular_distance",
    "melt_kernel",
    "cholesky",
    "parse",
    "dumps",
]
