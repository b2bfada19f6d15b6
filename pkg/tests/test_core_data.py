import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rslkit import data as D
from rslkit.errors import ParseError, SchemaError, ValidationError

HEADER = "site_id,lat,lon,age,age_2sd,rsl,rsl_2sd,kind,core_id\n"


def write(tmp_path, body, meta="", name="d.csv"):
    p = tmp_path / name
    p.write_text(meta + HEADER + body)
    return p


def test_bp_row_converts_and_halves(tmp_path):
    p = write(tmp_path, "NJ,39.09,-75.23,1950,0,-0.1,0.1,SLIP,\n", "# age_unit=BP\n")
    (o,) = D.load_csv(p)
    assert o.age_mean == 0.0
    assert o.age_sd == 0.0
    assert o.rsl_sd == pytest.approx(0.05)
    assert o.kind is D.Kind.SLIP


def test_two_sigma_age_halved(tmp_path):
    p = write(tmp_path, "A,10,10,100,200,0,0.2,SLIP,\n")
    assert D.load_csv(p)[0].age_sd == 100.0


def test_ka_bp_unit(tmp_path):
    p = write(tmp_path, "A,10,10,2,0.1,0,0.2,SLIP,\n", "# age_unit=kaBP\n")
    o = D.load_csv(p)[0]
    assert o.age_mean == pytest.approx(-50.0)
    assert o.age_sd == pytest.approx(50.0)


def test_duplicate_rows_dropped(tmp_path):
    rows = ["A,10,10,100,20,1.0,0.2,SLIP,", "A,10,10,200,20,1.5,0.2,SLIP,", "A,10,10,100,20,1.0,0.2,SLIP,"]
    p = write(tmp_path, "\n".join(rows) + "\n")
    d = D.load_csv(p)
    # exhaustive pairwise oracle on the raw rows
    keys = [tuple(r.split(",")[i] for i in (0, 3, 5, 7)) for r in rows]
    dup = {j for i, j in itertools.combinations(range(3), 2) if keys[i] == keys[j]}
    assert len(d) == 3 - len(dup) == 2


def test_indicative_uncertainty_added_in_quadrature(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("site_id,lat,lon,age,age_2sd,rsl,rsl_2sd,kind,ind\nA,0,0,0,0,0,0.6,SLIP,0.8\n")
    o = D.load_csv(p, D.ColumnMap(indicative_2sd="ind"))[0]
    assert o.rsl_sd == pytest.approx(0.5)


def test_missing_column(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("site_id,lat,lon,age\nA,0,0,0\n")
    with pytest.raises(SchemaError, match="age_2sd"):
        D.load_csv(p)


def test_non_numeric_reports_line(tmp_path):
    p = write(tmp_path, "A,10,10,100,20,1.0,0.2,SLIP,\nA,10,10,abc,20,1.0,0.2,SLIP,\n")
    with pytest.raises(ParseError) as e:
        D.load_csv(p)
    assert e.value.row == 3


def test_invalid_rows_listed(tmp_path):
    p = write(tmp_path, "A,95,10,100,20,1.0,0.2,SLIP,\nB,10,10,100,-20,1.0,0.2,SLIP,\nC,0,0,0,0,0,0,SLIP,\n")
    with pytest.raises(ValidationError) as e:
        D.load_csv(p)
    assert e.value.rows == (2, 3)


def test_tide_gauge_requires_zero_age_sd():
    with pytest.raises(ValidationError):
        D.Observation("A", 0, 0, 1900, 1.0, 0.0, 0.01, D.Kind.TIDE_GAUGE)


def test_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        D.Dataset(())


def test_kind_parse_aliases():
    assert D.Kind.parse("tide_gauge") is D.Kind.TIDE_GAUGE
    assert D.Kind.parse("core") is D.Kind.CORE
    with pytest.raises(ValueError):
        D.Kind.parse("coral")


def _five_rows():
    return D.Dataset.from_arrays([1, 2, 3, 4, 5], 0.0, 0.1, site_id=["A", "A", "A", "B", "B"])


def test_split_sizes():
    parts = D.split_by_site(_five_rows())
    assert {k: len(v) for k, v in parts.items()} == {"A": 3, "B": 2}


def test_split_single_site_identity():
    d = D.Dataset.from_arrays([1, 2], 0.0, 0.1)
    parts = D.split_by_site(d)
    assert list(parts) == ["S"]
    assert parts["S"].observations == d.observations


def test_split_absent_site_is_missing_key():
    d = D.Dataset.from_arrays([1, 2, 3, 4], 0.0, 0.1, site_id=["A", "A", "B", "C"])
    parts = D.split_by_site(d, sites=["B", "Z"])
    assert sorted(parts) == ["B"]


def test_dataset_views_and_helpers():
    d = _five_rows()
    assert d.sites == ["A", "B"]
    assert len(d.without_site("A")) == 2
    assert len(d.subset(slice(1, 3))) == 2
    with pytest.raises(ValueError):
        d.t[0] = 9.0
    assert D.site_table(d) == {"A": (0.0, 0.0), "B": (0.0, 0.0)}


finite = st.floats(-1e4, 1e4, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), finite, st.floats(0, 500), finite, st.floats(0, 5)),
                min_size=1, max_size=12),
       st.sampled_from(["CE", "BP", "kaBP"]))
def test_round_trip_twelve_digits(tmp_path_factory, rows, unit):
    obs = D.dedup(D.Observation(s, 10.0, 20.0, a, asd, r, rsd) for s, a, asd, r, rsd in rows)
    d = D.Dataset(tuple(obs))
    p = tmp_path_factory.mktemp("rt") / "x.csv"
    D.write_csv(d, p, unit)
    back = D.load_csv(p)
    assert len(back) == len(d)
    for name in ("t", "t_sd", "y", "y_sd", "lat", "lon"):
        np.testing.assert_allclose(getattr(back, name), getattr(d, name), rtol=1e-12, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("ABCDE"), min_size=1, max_size=30))
def test_partition_sizes_sum(sites):
    d = D.Dataset.from_arrays(np.arange(len(sites)), 0.0, 0.1, site_id=sites)
    assert sum(len(v) for v in D.split_by_site(d).values()) == len(d)


@given(st.floats(-20000, 2020, allow_nan=False))
def test_ka_bp_involution(ce):
    assert abs(float(D.ka_bp_to_ce(D.ce_to_ka_bp(ce))) - ce) <= 1e-9
