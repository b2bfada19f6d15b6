"""Observation data model and CSV ingestion.

Units throughout the package: ages in years CE (negative = BCE, increasing
toward the present), sea level in meters, positive upward.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

BP_ORIGIN = 1950.0


class Kind(str, enum.Enum):
    SLIP = "SLIP"
    CORE = "CoreSample"
    TIDE_GAUGE = "TideGauge"

    @classmethod
    def parse(cls, text: str) -> "Kind":
        key = text.strip().lower().replace("_", "").replace("-", "")
        for k in cls:
            if k.value.lower() == key or k.name.lower().replace("_", "") == key:
                return k
        if key in ("core", "coresample"):
            return cls.CORE
        if key in ("tg", "tidegauge", "gauge"):
            return cls.TIDE_GAUGE
        raise ValueError(f"unknown observation kind {text!r}")


def ka_bp_to_ce(ka):
    """Convert thousands of years before 1950 to years CE."""
    return BP_ORIGIN - 1000.0 * np.asarray(ka, dtype=float)


def ce_to_ka_bp(ce):
    return (BP_ORIGIN - np.asarray(ce, dtype=float)) / 1000.0


def bp_to_ce(bp):
    return BP_ORIGIN - np.asarray(bp, dtype=float)


def _problems(o: "Observation") -> list[str]:
    out = []
    if not (-90.0 <= o.latitude <= 90.0):
        out.append(f"latitude {o.latitude} out of range")
    if not (-180.0 <= o.longitude <= 180.0):
        out.append(f"longitude {o.longitude} out of range")
    for name in ("age_mean", "age_sd", "rsl_mean", "rsl_sd", "latitude", "longitude"):
        if not math.isfinite(getattr(o, name)):
            out.append(f"{name} is not finite")
    if o.age_sd < 0:
        out.append("age_sd < 0")
    if o.rsl_sd < 0:
        out.append("rsl_sd < 0")
    if o.kind is Kind.TIDE_GAUGE and o.age_sd != 0:
        out.append("tide-gauge observation with nonzero age_sd")
    return out


@dataclass(frozen=True)
class Observation:
    """One dated RSL datum with 1-sigma vertical and age uncertainty."""

    site_id: str
    latitude: float
    longitude: float
    age_mean: float
    age_sd: float
    rsl_mean: float
    rsl_sd: float
    kind: Kind = Kind.SLIP
    core_id: str | None = None

    def __post_init__(self):
        probs = _problems(self)
        if probs:
            raise ValidationError(f"invalid observation at site {self.site_id!r}: " + "; ".join(probs), rows=[])

    def key(self):
        return (self.site_id, self.age_mean, self.rsl_mean, self.kind)


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of observations.

    Array views (``t``, ``y``, ``t_sd``, ``y_sd``, ``lat``, ``lon``) are built
    once on first access.
    """

    observations: tuple[Observation, ...]
    provenance: str = ""

    def __post_init__(self):
        if not isinstance(self.observations, tuple):
            object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.observations) == 0:
            raise ValidationError("dataset is empty", rows=[])

    def __len__(self):
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i):
        return self.observations[i]

    def _col(self, name):
        a = np.array([getattr(o, name) for o in self.observations], dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def t(self) -> np.ndarray:
        return self._col("age_mean")

    @cached_property
    def t_sd(self) -> np.ndarray:
        return self._col("age_sd")

    @cached_property
    def y(self) -> np.ndarray:
        return self._col("rsl_mean")

    @cached_property
    def y_sd(self) -> np.ndarray:
        return self._col("rsl_sd")

    @cached_property
    def lat(self) -> np.ndarray:
        return self._col("latitude")

    @cached_property
    def lon(self) -> np.ndarray:
        return self._col("longitude")

    @cached_property
    def site_ids(self) -> tuple[str, ...]:
        return tuple(o.site_id for o in self.observations)

    @property
    def sites(self) -> list[str]:
        """Site ids in order of first appearance."""
        return list(dict.fromkeys(self.site_ids))

    def subset(self, index) -> "Dataset":
        idx = np.arange(len(self))[index]
        return Dataset(tuple(self.observations[i] for i in np.atleast_1d(idx)), self.provenance)

    def without_site(self, site_id: str) -> "Dataset":
        return Dataset(tuple(o for o in self.observations if o.site_id != site_id), self.provenance)

    @classmethod
    def from_arrays(
        cls,
        t,
        y,
        y_sd,
        t_sd=None,
        site_id="S",
        lat=0.0,
        lon=0.0,
        kind=Kind.SLIP,
        provenance="",
    ) -> "Dataset":
        """Build a dataset from parallel arrays; scalars broadcast."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = t.size
        y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
        y_sd = np.broadcast_to(np.asarray(y_sd, dtype=float), (n,))
        t_sd = np.zeros(n) if t_sd is None else np.broadcast_to(np.asarray(t_sd, dtype=float), (n,))
        sid = np.broadcast_to(np.asarray(site_id, dtype=object), (n,))
        la = np.broadcast_to(np.asarray(lat, dtype=float), (n,))
        lo = np.broadcast_to(np.asarray(lon, dtype=float), (n,))
        kinds = np.broadcast_to(np.asarray(kind, dtype=object), (n,))
        obs = tuple(
            Observation(str(sid[i]), float(la[i]), float(lo[i]), float(t[i]), float(t_sd[i]),
                        float(y[i]), float(y_sd[i]), Kind(kinds[i]))
            for i in range(n)
        )
        return cls(obs, provenance)


@dataclass(frozen=True)
class ColumnMap:
    """Mapping from logical fields to CSV header names.

    ``age_unit`` overrides the ``# age_unit=`` metadata line when set.
    ``sd_are_2sigma`` states that the uncertainty columns hold 2-sigma values.
    ``indicative_2sd`` names an optional extra vertical-uncertainty column
    that is combined with ``rsl_2sd`` by adding variances.
    """

    site_id: str = "site_id"
    lat: str = "lat"
    lon: str = "lon"
    age: str = "age"
    age_2sd: str = "age_2sd"
    rsl: str = "rsl"
    rsl_2sd: str = "rsl_2sd"
    kind: str = "kind"
    core_id: str | None = "core_id"
    indicative_2sd: str | None = None
    age_unit: str | None = None
    sd_are_2sigma: bool = True

    def required(self) -> list[str]:
        return [self.site_id, self.lat, self.lon, self.age, self.age_2sd, self.rsl, self.rsl_2sd, self.kind]


_AGE_UNITS = ("CE", "BP", "kaBP")


def _normalise_unit(unit: str) -> str:
    u = unit.strip().replace(" ", "").lower()
    for name in _AGE_UNITS:
        if u == name.lower():
            return name
    raise SchemaError(f"unknown age unit {unit!r}; expected one of {', '.join(_AGE_UNITS)}")


def _read_metadata(lines: Sequence[str]) -> tuple[dict, list[str]]:
    meta, body = {}, []
    for line in lines:
        s = line.strip()
        if s.startswith("#"):
            for part in s.lstrip("#").split(","):
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k.strip()] = v.strip()
        elif s:
            body.append(line)
    return meta, body


def load_csv(path, schema: ColumnMap | None = None, provenance: str | None = None) -> Dataset:
    """Read and validate an RSL compilation.

    Rows whose (site_id, age, rsl, kind) repeat an earlier row are dropped.

    Raises
    ------
    SchemaError
        A declared column is missing from the header.
    ParseError
        A numeric cell cannot be parsed; ``row`` is the 1-based line number.
    ValidationError
        One or more rows violate the observation invariants.
    """
    schema = schema or ColumnMap()
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    meta, _ = _read_metadata(lines)
    unit = _normalise_unit(schema.age_unit or meta.get("age_unit", "CE"))

    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.strip().startswith("#")]
    if not numbered:
        raise SchemaError(f"{path}: no header row")
    reader = csv.reader([ln for _, ln in numbered])
    header = [h.strip() for h in next(reader)]
    cols = {h: i for i, h in enumerate(header)}
    needed = schema.required() + ([schema.indicative_2sd] if schema.indicative_2sd else [])
    for name in needed:
        if name not in cols:
            raise SchemaError(f"{path}: missing column {name!r}")
    has_core = schema.core_id is not None and schema.core_id in cols
    scale = 0.5 if schema.sd_are_2sigma else 1.0

    obs: list[Observation] = []
    bad: list[int] = []
    msgs: list[str] = []
    seen = set()
    for (lineno, _), row in zip(numbered[1:], reader):
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))

        def num(col, default=None):
            cell = row[cols[col]].strip()
            if cell == "" and default is not None:
                return default
            try:
                return float(cell)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: column {col!r} is not numeric: {cell!r}", row=lineno) from None

        lat, lon = num(schema.lat), num(schema.lon)
        age, age2 = num(schema.age), num(schema.age_2sd, 0.0)
        rsl, rsl2 = num(schema.rsl), num(schema.rsl_2sd, 0.0)
        if schema.indicative_2sd:
            ind2 = num(schema.indicative_2sd, 0.0)
            rsl2 = math.sqrt(rsl2 * rsl2 + ind2 * ind2) if rsl2 >= 0 else rsl2
        if unit == "kaBP":
            age, age2 = float(ka_bp_to_ce(age)), 1000.0 * age2
        elif unit == "BP":
            age = float(bp_to_ce(age))
        try:
            kind = Kind.parse(row[cols[schema.kind]])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}", row=lineno) from None
        core = row[cols[schema.core_id]].strip() if has_core else ""
        try:
            o = Observation(row[cols[schema.site_id]].strip(), lat, lon, age, scale * age2, rsl,
                            scale * rsl2, kind, core or None)
        except ValidationError as exc:
            bad.append(lineno)
            msgs.append(f"line {lineno}: {exc}")
            continue
        if o.key() in seen:
            continue
        seen.add(o.key())
        obs.append(o)
    if bad:
        raise ValidationError(f"{path}: {len(bad)} invalid row(s):\n" + "\n".join(msgs), rows=bad)
    if not obs:
        raise ValidationError(f"{path}: no observations", rows=[])
    return Dataset(tuple(obs), provenance if provenance is not None else f"{path.name} ({unit})")


def write_csv(d: Dataset, path, age_unit: str = "CE") -> None:
    """Write a dataset in the default column layout with 2-sigma columns."""
    unit = _normalise_unit(age_unit)
    with open(path, "w", newline="") as fh:
        fh.write(f"# age_unit={unit}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "lat", "lon", "age", "age_2sd", "rsl", "rsl_2sd", "kind", "core_id"])
        for o in d:
            if unit == "kaBP":
                age, age2 = float(ce_to_ka_bp(o.age_mean)), 2.0 * o.age_sd / 1000.0
            elif unit == "BP":
                age, age2 = BP_ORIGIN - o.age_mean, 2.0 * o.age_sd
            else:
                age, age2 = o.age_mean, 2.0 * o.age_sd
            w.writerow([o.site_id, f"{o.latitude:.17g}", f"{o.longitude:.17g}", f"{age:.17g}",
                        f"{age2:.17g}", f"{o.rsl_mean:.17g}", f"{2.0 * o.rsl_sd:.17g}",
                        o.kind.value, o.core_id or ""])


def split_by_site(d: Dataset, sites: Iterable[str] | None = None) -> dict[str, Dataset]:
    """Partition by site id, preserving order within each site.

    When ``sites`` is given only those keys are returned; requested sites
    with no data are absent from the result rather than mapped to empty sets.
    """
    groups: dict[str, list[Observation]] = {}
    for o in d:
        groups.setdefault(o.site_id, []).append(o)
    if sites is not None:
        wanted = set(sites)
        groups = {k: v for k, v in groups.items() if k in wanted}
    return {k: Dataset(tuple(v), d.provenance) for k, v in groups.items()}


def dedup(obs: Iterable[Observation]) -> list[Observation]:
    seen, out = set(), []
    for o in obs:
        if o.key() not in seen:
            seen.add(o.key())
            out.append(o)
    return out


def site_table(d: Dataset) -> Mapping[str, tuple[float, float]]:
    """First-seen (lat, lon) of each site."""
    out = {}
    for o in d:
        out.setdefault(o.site_id, (o.latitude, o.longitude))
    return out


__all__ = [
    "Kind",
    "Observation",
    "Dataset",
    "ColumnMap",
    "load_csv",
    "write_csv",
    "split_by_site",
    "dedup",
    "site_table",
    "ka_bp_to_ce",
    "ce_to_ka_bp",
    "bp_to_ce",
]
