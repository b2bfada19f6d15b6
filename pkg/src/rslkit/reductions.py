"""Dimension reductions for dense fields and tide-gauge networks.

EOF regression fits the leading spatial patterns of a dense field to sparse
gauge records.  The virtual-station method merges nearby gauges pairwise
and averages the resulting regional records into a global-mean series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon

from . import _backend
from .errors import ConfigurationError, UnderdeterminedError


# ---------------------------------------------------------------------------
# EOFs


@dataclass(frozen=True)
class EofBasis:
    """Leading spatial patterns of an anomaly field.

    ``patterns`` is (locations × k) with orthonormal columns; ``fractions``
    gives each pattern's share of the total anomaly variance.
    """

    patterns: np.ndarray
    fractions: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray
    lat: np.ndarray | None = None
    lon: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.patterns.shape[1]

    @property
    def n_locations(self) -> int:
        return self.patterns.shape[0]

    def reconstruct(self, dense_field) -> np.ndarray:
        """Project a field onto the basis (after removing the stored means)."""
        A = np.asarray(dense_field, dtype=float) - self.mean[:, None]
        U = self.patterns
        return self.mean[:, None] + U @ (U.T @ A)

    def locate(self, lat, lon, tol: float = 1e-6) -> np.ndarray:
        """Grid index of each (lat, lon); every point must lie on the grid."""
        if self.lat is None or self.lon is None:
            raise ConfigurationError("basis has no coordinates to match against")
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        D = _backend.angular_distance(lat, lon, self.lat, self.lon)
        idx = np.argmin(D, axis=1)
        off = D[np.arange(lat.size), idx] > tol
        if off.any():
            raise ConfigurationError(f"gauge(s) {np.flatnonzero(off).tolist()} are not on the basis grid")
        return idx


def eof_decompose(dense_field, k: int, lat=None, lon=None, rtol: float = 1e-12) -> EofBasis:
    """Top-``k`` EOFs of a (locations × times) field after removing location means."""
    A = np.asarray(dense_field, dtype=float)
    if A.ndim != 2:
        raise ConfigurationError("field must be a locations x times matrix")
    if not np.all(np.isfinite(A)):
        raise ConfigurationError("field must be finite")
    L, T = A.shape
    if k < 1 or k > min(L, T):
        raise ConfigurationError(f"k={k} must lie in [1, {min(L, T)}]")
    mean = A.mean(axis=1)
    U, s, _ = np.linalg.svd(A - mean[:, None], full_matrices=False)
    rank = int(np.sum(s > rtol * (s[0] if s.size else 0.0))) if s.size and s[0] > 0 else 0
    if k > rank:
        raise UnderdeterminedError(f"k={k} exceeds the anomaly rank {rank}")
    total = float(np.sum(s**2))
    frac = s[:k] ** 2 / total
    Uk = U[:, :k].copy()
    # sign convention: largest-magnitude entry of each pattern is positive
    flip = np.sign(Uk[np.argmax(np.abs(Uk), axis=0), np.arange(k)])
    Uk *= flip
    return EofBasis(Uk, frac, s.copy(), mean,
                    None if lat is None else np.asarray(lat, dtype=float),
                    None if lon is None else np.asarray(lon, dtype=float))


@dataclass
class EofFit:
    """Per-step common term ``g``, EOF amplitudes ``alpha`` and the implied field."""

    g: np.ndarray
    alpha: np.ndarray
    field: np.ndarray

    def __iter__(self):
        yield self.g
        yield self.alpha
        yield self.field


def eof_regress(basis: EofBasis, sparse_obs, gauges, gia_correction=None) -> EofFit:
    """Least-squares fit of ``[1, U]`` to gauge anomalies at each step.

    Parameters
    ----------
    sparse_obs
        (times × gauges) array, NaN where a gauge has no value.
    gauges
        Grid index of each gauge, or an array of (lat, lon) rows matched
        exactly to the basis grid.
    gia_correction
        Optional GIA signal on the basis grid, either per location or
        (locations × times); subtracted from the observations first.

    Raises
    ------
    UnderdeterminedError
        Listing every step with fewer than k+1 usable gauges or a rank-deficient
        design.
    """
    Z = np.asarray(sparse_obs, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    T, G = Z.shape
    g_arr = np.asarray(gauges)
    if g_arr.ndim == 2 and g_arr.shape[1] == 2:
        idx = basis.locate(g_arr[:, 0], g_arr[:, 1])
    else:
        idx = g_arr.astype(int).ravel()
        if np.any(idx < 0) or np.any(idx >= basis.n_locations):
            raise ConfigurationError("gauge index outside the basis grid")
    if idx.size != G:
        raise ConfigurationError(f"{G} gauge columns but {idx.size} gauge locations")
    if gia_correction is not None:
        gia = np.asarray(gia_correction, dtype=float)
        if gia.ndim == 1:
            Z = Z - gia[idx][None, :]
        elif gia.shape == (basis.n_locations, T):
            Z = Z - gia[idx].T
        else:
            raise ConfigurationError("gia_correction must be per location or locations x times")
    U = basis.patterns
    k = basis.k
    D_all = np.column_stack([np.ones(G), U[idx]])
    g = np.full(T, np.nan)
    alpha = np.full((T, k), np.nan)
    bad = []
    for j in range(T):
        ok = np.isfinite(Z[j])
        if ok.sum() < k + 1:
            bad.append(j)
            continue
        D = D_all[ok]
        if np.linalg.matrix_rank(D) < k + 1:
            bad.append(j)
            continue
        coef, *_ = np.linalg.lstsq(D, Z[j, ok], rcond=None)
        g[j] = coef[0]
        alpha[j] = coef[1:]
    if bad:
        raise UnderdeterminedError(f"{len(bad)} step(s) cannot separate the common term and {k} EOF(s)", bad)
    return EofFit(g, alpha, g[None, :] + U @ alpha.T)


# ---------------------------------------------------------------------------
# virtual stations


@dataclass(frozen=True)
class Region:
    """A named area given by a lon/lat polygon or an explicit site list."""

    name: str
    weight: float
    polygon: tuple | None = None
    sites: tuple | None = None

    def __post_init__(self):
        if not self.weight >= 0:
            raise ConfigurationError(f"region {self.name}: weight must be non-negative")
        if (self.polygon is None) == (self.sites is None):
            raise ConfigurationError(f"region {self.name}: give exactly one of polygon or sites")
        if self.polygon is not None and len(self.polygon) < 3:
            raise ConfigurationError(f"region {self.name}: polygon needs at least three (lat, lon) vertices")

    def contains(self, site_id: str, lat: float, lon: float) -> bool:
        if self.sites is not None:
            return site_id in self.sites
        poly = Polygon([(lo, la) for la, lo in self.polygon])
        return poly.covers(Point(lon, lat))


@dataclass(frozen=True)
class GaugeSet:
    """Aligned tide-gauge records: ``levels`` is (times × gauges), NaN when missing."""

    times: np.ndarray
    levels: np.ndarray
    site_ids: tuple
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        T, G = np.shape(self.levels)
        if len(self.times) != T or len(self.site_ids) != G or len(self.lat) != G or len(self.lon) != G:
            raise ConfigurationError("gauge metadata does not match the level matrix")
        if len(set(self.site_ids)) != G:
            raise ConfigurationError("gauge site ids must be unique")


@dataclass
class _Station:
    name: str
    lat: float
    lon: float
    diff: np.ndarray
    cover: np.ndarray


def midpoint(lat1, lon1, lat2, lon2) -> tuple[float, float]:
    """Great-circle midpoint of two points (degrees)."""
    p1, l1, p2, l2 = map(math.radians, (lat1, lon1, lat2, lon2))
    a = np.array([math.cos(p1) * math.cos(l1), math.cos(p1) * math.sin(l1), math.sin(p1)])
    b = np.array([math.cos(p2) * math.cos(l2), math.cos(p2) * math.sin(l2), math.sin(p2)])
    m = a + b
    nrm = np.linalg.norm(m)
    if nrm < 1e-12:
        raise ConfigurationError("antipodal gauges have no unique midpoint")
    m /= nrm
    return math.degrees(math.atan2(m[2], math.hypot(m[0], m[1]))), math.degrees(math.atan2(m[1], m[0]))


def _merge(a: _Station, b: _Station) -> _Station:
    both = np.isfinite(a.diff) & np.isfinite(b.diff)
    d = np.where(both, 0.5 * (a.diff + b.diff), np.where(np.isfinite(a.diff), a.diff, b.diff))
    lat, lon = midpoint(a.lat, a.lon, b.lat, b.lon)
    x, y = sorted([a.name, b.name])
    return _Station(f"({x}+{y})", lat, lon, d, a.cover | b.cover)


def _closest_pair(st: list[_Station]):
    lat = np.array([s.lat for s in st])
    lon = np.array([s.lon for s in st])
    D = _backend.angular_distance(lat, lon, lat, lon)
    best = None
    for i in range(len(st)):
        for j in range(i + 1, len(st)):
            key = (round(float(D[i, j]), 9), *sorted([st[i].name, st[j].name]))
            if best is None or key < best[0]:
                best = (key, i, j)
    return best[1], best[2]


def _integrate(st: _Station) -> np.ndarray:
    lev = np.concatenate([[0.0], np.cumsum(np.nan_to_num(st.diff, nan=0.0))])
    return np.where(st.cover, lev, np.nan)


@dataclass
class VirtualStationResult:
    times: np.ndarray
    gmsl: np.ndarray
    regional: dict
    stations: dict
    anchor: int

    def rate(self) -> float:
        """Least-squares slope of the global series (units per time unit)."""
        ok = np.isfinite(self.gmsl)
        return float(np.polyfit(self.times[ok], self.gmsl[ok], 1)[0])


def region_members(gauges: GaugeSet, region: Region) -> list[int]:
    return [i for i, s in enumerate(gauges.site_ids) if region.contains(s, gauges.lat[i], gauges.lon[i])]


def virtual_station_gmsl(gauges: GaugeSet, regions, weight_tol: float = 1e-9) -> VirtualStationResult:
    """Merge gauges closest-pair-first within each region, then average regions.

    Merging averages first differences where both records have them and
    otherwise keeps whichever exists; the merged station sits at the
    great-circle midpoint.  Each region's surviving record is integrated and
    the area-weighted average is anchored to zero at the first step where
    every region has data.
    """
    regions = list(regions)
    if not regions:
        raise ConfigurationError("need at least one region")
    w = np.array([r.weight for r in regions], dtype=float)
    if abs(w.sum() - 1.0) > weight_tol:
        raise ConfigurationError(f"region weights sum to {w.sum()}, not 1")
    Y = np.asarray(gauges.levels, dtype=float)
    cover = np.isfinite(Y)
    diffs = Y[1:] - Y[:-1]
    regional = {}
    stations = {}
    for r in regions:
        idx = region_members(gauges, r)
        if not idx:
            raise ConfigurationError(f"region {r.name!r} contains no gauges")
        st = [_Station(gauges.site_ids[i], float(gauges.lat[i]), float(gauges.lon[i]), diffs[:, i].copy(),
                       cover[:, i].copy()) for i in idx]
        while len(st) > 1:
            i, j = _closest_pair(st)
            merged = _merge(st[i], st[j])
            st = [s for k, s in enumerate(st) if k not in (i, j)] + [merged]
        regional[r.name] = _integrate(st[0])
        stations[r.name] = (st[0].lat, st[0].lon, st[0].name)
    R = np.column_stack([regional[r.name] for r in regions])
    common = np.flatnonzero(np.all(np.isfinite(R), axis=1))
    if common.size == 0:
        raise ConfigurationError("regions share no common time step")
    anchor = int(common[0])
    R = R - R[anchor][None, :]
    for k, r in enumerate(regions):
        regional[r.name] = R[:, k]
    with np.errstate(invalid="ignore"):
        gm = R @ w
    return VirtualStationResult(np.asarray(gauges.times, dtype=float), gm, regional, stations, anchor)


__all__ = [
    "EofBasis",
    "EofFit",
    "eof_decompose",
    "eof_regress",
    "Region",
    "GaugeSet",
    "VirtualStationResult",
    "midpoint",
    "region_members",
    "virtual_station_gmsl",
]
