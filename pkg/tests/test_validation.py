from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rslkit import gp
from rslkit import kernels as K
from rslkit import validation as V
from rslkit.data import Dataset, Kind
from rslkit.errors import ConfigurationError, DegeneracyError, InsufficientDataError
from rslkit.kernels import Points


def simple_truth(**kw):
    base = dict(t_range=(0.0, 2000.0), slope=0.001, intercept=0.5,
                gp_components={"wiggle": K.Matern(0.01, 300.0, 1.5)}, n_anchor=80, seed=3)
    base.update(kw)
    return V.SyntheticTruth(**base)


def test_zero_noise_lies_on_truth():
    d, h = V.generate(simple_truth(), 50)
    np.testing.assert_array_equal(d.y, h.f_true)
    np.testing.assert_array_equal(d.t, h.t_true)
    np.testing.assert_allclose(h.truth(h.t_true), h.f_true, rtol=0, atol=1e-12)


def test_generate_is_seeded():
    a, _ = V.generate(simple_truth(), 40, 0.1, 20.0)
    b, _ = V.generate(simple_truth(), 40, 0.1, 20.0)
    assert a == b
    c, _ = V.generate(simple_truth(seed=4), 40, 0.1, 20.0)
    assert c != a


def test_noise_scales_monte_carlo():
    d, h = V.generate(simple_truth(), 10_000, rsl_sd=0.2, age_sd=50.0)
    assert np.std(np.asarray(d.y) - h.f_true) == pytest.approx(0.2, rel=0.03)
    assert np.std(np.asarray(d.t) - h.t_true) == pytest.approx(50.0, rel=0.03)


def test_truth_components_add_up():
    spec = simple_truth(change_points=(800.0,), rates=(0.002, -0.001))
    tr = V.Truth(spec)
    t = np.linspace(0, 2000, 9)
    assert tr.components == ["trend", "changepoint", "wiggle"]
    np.testing.assert_allclose(tr(t), sum(tr.component(c, t) for c in tr.components), rtol=1e-14)
    cp = tr.component("changepoint", np.array([0.0, 800.0, 2000.0]))
    np.testing.assert_allclose(cp, [0.0, 1.6, 0.4], atol=1e-12)
    plain = V.Truth(simple_truth(change_points=(800.0,), rates=(0.002, -0.001), gp_components={}))
    np.testing.assert_allclose(plain.rate(np.array([500.0, 1500.0])), [0.003, 0.0], atol=1e-12)


def test_multi_site_truth_and_kinds():
    sites = (V.Site("A", 40.0, -74.0), V.Site("B", 41.0, -72.0))
    comp = {"reg": K.SeparableSpaceTime(K.Matern(0.04, 500.0, 1.5), K.Matern(1.0, 3.0, 1.5))}
    d, h = V.generate(simple_truth(sites=sites, gp_components=comp), 20, 0.05, 10.0, Kind.TIDE_GAUGE)
    assert set(d.sites) == {"A", "B"}
    assert np.all(np.asarray(d.t_sd) == 0.0)


def test_truth_spec_validation():
    with pytest.raises(ConfigurationError):
        V.SyntheticTruth(t_range=(1.0, 0.0))
    with pytest.raises(ConfigurationError):
        V.SyntheticTruth(change_points=(1.0,), rates=(1.0,))
    with pytest.raises(ConfigurationError):
        V.generate(simple_truth(), 0)


def acf_oracle(x, L):
    r = x - x.mean()
    full = np.correlate(r, r, mode="full")[r.size - 1:]
    return full[:L + 1] / full[0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=80), st.integers(1, 20))
def test_acf_bounds(xs, L):
    x = np.array(xs)
    if np.ptp(x) < 1e-6:
        return
    L = min(L, x.size - 1)
    a = V.acf(x, L)
    assert a[0] == 1.0
    assert np.all(np.abs(a) <= 1 + 1e-12)
    np.testing.assert_allclose(a, acf_oracle(x, L), rtol=1e-9, atol=1e-12)


def diag_for(res):
    n = res.size
    d = Dataset.from_arrays(np.arange(n, dtype=float), res, 1.0)
    return V.residual_diagnostics(np.zeros(n), d)


def iid_flag_rate(seeds):
    return np.mean([diag_for(np.random.default_rng(s).standard_normal(500)).flag for s in seeds])


def test_iid_flag_rate_matches_binomial_oracle():
    # 40 lags each outside the band with probability ~0.05; flag needs > 2 of them
    p = 1 - stats.binom.cdf(2, 40, 0.05)
    rate = iid_flag_rate(range(200))
    assert abs(rate - p) <= 3 * np.sqrt(p * (1 - p) / 200)


@pytest.mark.xfail(strict=True, reason="with 40 lags the >5% rule fires on about a third of iid series")
def test_iid_flag_rarely_raised():
    assert iid_flag_rate(range(200)) <= 0.10


def test_ar1_flag_raised():
    hits = 0
    for s in range(200):
        rng = np.random.default_rng(s)
        e = rng.standard_normal(500)
        x = np.empty(500)
        x[0] = e[0]
        for i in range(1, 500):
            x[i] = 0.8 * x[i - 1] + e[i]
        hits += diag_for(x).flag
    assert hits / 200 >= 0.95


def test_diagnostics_shape_and_errors():
    rng = np.random.default_rng(0)
    dg = diag_for(rng.standard_normal(20))
    assert sorted(dg.acf) == list(range(6))
    assert dg.band == pytest.approx(1.96 / np.sqrt(20))
    with pytest.raises(DegeneracyError):
        diag_for(np.ones(20))
    with pytest.raises(InsufficientDataError):
        diag_for(rng.standard_normal(7))


def test_diagnostics_time_order():
    d = Dataset.from_arrays([3.0, 1.0, 2.0, 0.0, 5.0, 4.0, 7.0, 6.0], np.arange(8.0), 1.0)
    dg = V.residual_diagnostics(np.zeros(8), d)
    np.testing.assert_array_equal(dg.t, np.arange(8.0))


def test_coverage_limits():
    y = np.array([0.0, 1.0, -2.0])
    assert V.coverage(np.zeros(3), np.full(3, np.inf), y) == 1.0
    assert V.coverage(np.full(3, 0.5), np.zeros(3), y) == 0.0
    with pytest.raises(ConfigurationError):
        V.coverage(np.zeros(3), np.ones(3), y, level=1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_coverage_monotone_in_level(seed, a, b):
    rng = np.random.default_rng(seed)
    y, m, s = rng.standard_normal(30), rng.standard_normal(30), rng.uniform(0.1, 2, 30)
    lo, hi = sorted([a, b])
    assert V.coverage(m, s, y, lo) <= V.coverage(m, s, y, hi)


def test_well_specified_gp_coverage():
    spec = gp.GpModelSpec(K.Sum((K.Matern(0.04, 500.0, 1.5, name="a"), K.WhiteNoise(1e-4, name="white"))), {},
                          "constant")
    latent = spec.kernel.without_white()
    covs = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = np.sort(rng.uniform(0, 5000, 200))
        L, _ = K.cholesky(latent.gram(Points(t)))
        y = L @ rng.standard_normal(200) + np.sqrt(0.05**2 + 1e-4) * rng.standard_normal(200)
        m = gp.condition(spec, {}, Dataset.from_arrays(t, y, 0.05))
        covs.append(V.model_coverage(m))
    assert 0.92 <= np.mean(covs) <= 0.985


def test_pipeline_deterministic():
    def run():
        d, _ = V.generate(simple_truth(), 60, 0.05)
        m = gp.fit_et_gp(d, restarts=1, seed=7)
        return V.model_coverage(m), m.theta
    assert run() == run()


def five_site_truth(seed):
    rng = np.random.default_rng(1000 + seed)
    sites = tuple(V.Site(f"S{i}", 38 + rng.uniform(-3, 3), -74 + rng.uniform(-3, 3)) for i in range(4))
    comps = {"common": K.Matern(1.0, 3000.0, 1.5),
             "regional": K.SeparableSpaceTime(K.Matern(0.09, 2500.0, 1.5), K.Matern(1.0, 6.0, 1.5)),
             "local": K.SeparableSpaceTime(K.Matern(0.0025, 1000.0, 1.5), K.Matern(1.0, 0.2, 1.5))}
    return V.SyntheticTruth(t_range=(-8000.0, 2000.0), sites=sites, gp_components=comps, n_anchor=120, seed=seed)


def test_leave_out_duplicated_site():
    d, _ = V.generate(five_site_truth(0), 48, rsl_sd=0.1)
    twin = d.subset(np.asarray(d.site_ids) == "S0")
    copy = tuple(replace(o, site_id="S4") for o in twin.observations)
    d = Dataset(d.observations + copy)
    fam = V.est_gp_family(restarts=1, seed=0)
    held = V.leave_site_out(fam, d, "S4")
    mu, _ = fam.predictive(fam.fit(d), twin)
    rmse_in = float(np.sqrt(np.mean((np.asarray(twin.y) - mu) ** 2)))
    assert held.n == 12
    assert held.rmse / rmse_in < 1.5


def test_leave_site_out_errors():
    d = Dataset.from_arrays([0.0, 1.0], [0.0, 1.0], 0.1, site_id=["A", "B"])
    with pytest.raises(InsufficientDataError):
        V.leave_site_out(V.est_gp_family(), d, "A")
    d3 = Dataset.from_arrays([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], 0.1, site_id=["A", "B", "C"])
    with pytest.raises(ConfigurationError):
        V.leave_site_out(V.est_gp_family(), d3, "Z")
