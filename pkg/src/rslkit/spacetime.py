"""Empirical spatio-temporal GP with additive multi-scale components.

RSL at location x and time t is modelled as

    f(x, t) = g(t) + r(x, t) + m(x, t) + l(x, t) + w

with a common temporal signal g, a regional field r, a local field m, a
linear-in-time term l with short spatial correlation, and white noise w.
Distances between sites are great-circle angles in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import gp
from . import kernels as K
from .data import Dataset
from .errors import ConfigurationError, InsufficientDataError, SizeError
from .gp import GpModel, GpModelSpec, PosteriorField
from .kernels import Kernel, Points

COMPONENTS = ("common", "regional", "local", "linear")
DEFAULT_MAX_N = 2000


@dataclass(frozen=True)
class StGpSpec:
    """Component kernels and bounds for the spatio-temporal model.

    ``components`` maps each named component to its position among the
    top-level terms of ``gp.kernel`` (a :class:`~rslkit.kernels.Sum`).
    """

    gp: GpModelSpec
    components: Mapping[str, int] = field(default_factory=lambda: {c: i for i, c in enumerate(COMPONENTS)})
    max_n: int = DEFAULT_MAX_N

    def __post_init__(self):
        if not isinstance(self.gp.kernel, K.Sum):
            raise ConfigurationError("spatio-temporal kernel must be a sum of components")
        terms = self.gp.kernel.terms
        for name, i in self.components.items():
            if not 0 <= i < len(terms):
                raise ConfigurationError(f"component {name!r} points past the kernel's terms")
        b = self.gp.bounds
        if "regional_space.l" in b and "local_space.l" in b:
            if b["regional_space.l"][0] <= b["local_space.l"][1]:
                raise ConfigurationError("regional spatial length bounds must lie above the local ones")

    @property
    def kernel(self) -> Kernel:
        return self.gp.kernel

    def component_kernel(self, name: str, kernel: Kernel | None = None) -> Kernel:
        kern = self.gp.kernel if kernel is None else kernel
        return kern.terms[self.components[name]]

    @classmethod
    def default(cls, t_ref: float = 2000.0, max_n: int = DEFAULT_MAX_N) -> "StGpSpec":
        """Matérn(3/2) components with scale-separated spatial bounds.

        The linear term pivots at ``t_ref`` (years CE).  Amplitude bounds
        are variances; spatial lengths are in degrees of arc.
        """
        kern = K.Sum((
            K.Matern(s2=1.0, l=3000.0, nu=1.5, name="common"),
            K.SeparableSpaceTime(K.Matern(s2=0.1, l=3000.0, nu=1.5, name="regional"),
                                 K.Matern(s2=1.0, l=6.0, nu=1.5, name="regional_space")),
            K.SeparableSpaceTime(K.Matern(s2=0.01, l=500.0, nu=1.5, name="local"),
                                 K.Matern(s2=1.0, l=0.2, nu=1.5, name="local_space")),
            K.SeparableSpaceTime(K.DotProduct(s2=1e-8, t0=t_ref, name="linear"),
                                 K.Matern(s2=1.0, l=0.2, nu=1.5, name="linear_space")),
            K.WhiteNoise(s2=1e-4, name="white"),
        ))
        bounds = {
            "common.s2": (1e-6, 1e4),
            "common.l": (500.0, 2e4),
            "regional.s2": (1e-6, 1e4),
            "regional.l": (500.0, 2e4),
            "regional_space.l": (2.0, 15.0),
            "local.s2": (1e-6, 1e2),
            "local.l": (50.0, 2e4),
            "local_space.l": (0.05, 0.5),
            "linear.s2": (1e-12, 1e-4),
            "linear_space.l": (0.05, 0.5),
            "white.s2": (1e-8, 1.0),
        }
        return cls(GpModelSpec(kern, bounds, "constant"), max_n=max_n)


@dataclass
class StGpModel:
    """Fitted spatio-temporal model: its StGpSpec plus the underlying GP fit."""

    spec: StGpSpec
    model: GpModel

    @property
    def theta(self) -> dict:
        return self.model.theta

    @property
    def log_likelihood(self) -> float:
        return self.model.log_likelihood

    @property
    def kernel(self) -> Kernel:
        return self.model.kernel


def _check_size(spec: StGpSpec, n: int):
    if n > spec.max_n:
        raise SizeError(f"{n} observations exceed the cap of {spec.max_n}; "
                        "the covariance factorisation costs O(n^3)")


def fit_est_gp(d: Dataset, spec: StGpSpec | None = None, restarts: int = 4, seed: int | None = 0,
               max_iters: int = 10, tol: float = 1e-3, maxiter: int | None = None) -> StGpModel:
    """Maximum-likelihood fit over all component hyperparameters.

    Age uncertainty enters through noisy-input variance inflation, iterated
    to a fixed point as in the temporal model.
    """
    spec = spec or StGpSpec.default()
    if len(d.sites) < 2:
        raise InsufficientDataError("the spatio-temporal model needs at least two sites")
    _check_size(spec, len(d))
    X = Points.from_dataset(d)
    m = gp.fit_nigp_points(d, X, spec.gp, restarts, max_iters, tol, seed, maxiter)
    return StGpModel(spec, m)


def condition_est_gp(d: Dataset, spec: StGpSpec, theta: Mapping[str, float], inflation=None) -> StGpModel:
    """Posterior at fixed hyperparameters."""
    _check_size(spec, len(d))
    return StGpModel(spec, gp.condition(spec.gp, theta, d, inflation, Points.from_dataset(d)))


def field_grid(lat, lon, times) -> Points:
    """Cartesian product of locations and times, ordered location-major."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if lat.shape != lon.shape:
        raise ConfigurationError("lat and lon must have the same length")
    nt = times.size
    return Points(np.tile(times, lat.size), np.repeat(lat, nt), np.repeat(lon, nt))


def map_grid(d: Dataset, times, step: float = 0.5) -> Points:
    """Regular lat/lon grid over the data's bounding box at the given times."""
    lat = np.arange(np.floor(d.lat.min() / step) * step, d.lat.max() + step, step)
    lon = np.arange(np.floor(d.lon.min() / step) * step, d.lon.max() + step, step)
    LA, LO = np.meshgrid(lat, lon, indexing="ij")
    return field_grid(LA.ravel(), LO.ravel(), times)


def _points(grid) -> Points:
    if isinstance(grid, Points):
        return grid
    a = np.asarray(grid, dtype=float)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ConfigurationError("grid must be Points or rows of (lat, lon, time)")
    return Points(a[:, 2], a[:, 0], a[:, 1])


def predict_field(model: StGpModel, grid) -> PosteriorField:
    """Joint posterior of the latent field (no white noise) on ``grid``."""
    return gp.predict(model.model, _points(grid))


def decompose(model: StGpModel, grid, full_cov: bool = True) -> dict[str, PosteriorField]:
    """Posterior of each additive component on ``grid``.

    The constant prior mean is carried by the common component, so the
    component means add up to the total posterior mean.
    """
    Xg = _points(grid)
    m = model.model
    out = {}
    for name in model.spec.components:
        kc = model.spec.component_kernel(name, m.kernel)
        mean, C = m.cond.field(kc, Xg, full_cov)
        if name == "common":
            mean = mean + m.prior_mean(Xg)
        out[name] = PosteriorField(Xg, mean, C, "level", name)
    return out


def rate_field(p: PosteriorField, window: float) -> PosteriorField:
    """Average rates over ``window`` at each grid location."""
    return gp.rate_transform(p, window)


def component_grams(model_or_spec, X: Points, theta: Mapping[str, float] | None = None) -> dict[str, np.ndarray]:
    """Prior Gram matrix of every top-level term, including white noise."""
    if isinstance(model_or_spec, StGpModel):
        kern = model_or_spec.kernel
    else:
        kern = model_or_spec.gp.kernel_at(theta or {})
    return {f"term{i}": t.gram(X) for i, t in enumerate(kern.terms)}


__all__ = [
    "StGpSpec",
    "StGpModel",
    "COMPONENTS",
    "fit_est_gp",
    "condition_est_gp",
    "field_grid",
    "map_grid",
    "predict_field",
    "decompose",
    "rate_field",
    "component_grams",
]
