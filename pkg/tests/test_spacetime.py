import numpy as np
import pytest

from rslkit import gp
from rslkit import kernels as K
from rslkit import spacetime as ST
from rslkit.data import Dataset, Observation
from rslkit.errors import ConfigurationError, InsufficientDataError, SizeError
from rslkit.kernels import Points

THETA = {"common.s2": 1.0, "common.l": 3000.0, "regional.s2": 0.25, "regional.l": 3000.0,
         "regional_space.l": 5.0, "local.s2": 0.01, "local.l": 1000.0, "local_space.l": 0.2,
         "linear.s2": 1e-10, "linear_space.l": 0.2, "white.s2": 1e-4}


def st_data(seed, nsite=5, per=12, theta=THETA, ysd=0.1, lat=None, lon=None):
    """Draw multi-site data from the spatio-temporal prior itself."""
    rng = np.random.default_rng(seed)
    spec = ST.StGpSpec.default()
    lat = 38 + rng.uniform(-4, 4, nsite) if lat is None else np.asarray(lat, float)
    lon = -75 + rng.uniform(-4, 4, nsite) if lon is None else np.asarray(lon, float)
    nsite = lat.size
    t = rng.uniform(-8000, 2000, (nsite, per)).ravel()
    X = Points(t, np.repeat(lat, per), np.repeat(lon, per))
    kern = spec.gp.kernel_at(theta)
    L, _ = K.cholesky(kern.gram(X))
    y = L @ rng.standard_normal(t.size) + ysd * rng.standard_normal(t.size)
    sites = np.repeat([f"S{i}" for i in range(nsite)], per)
    obs = tuple(Observation(s, a, b, tt, 0.0, yy, ysd) for s, a, b, tt, yy in zip(sites, X.lat, X.lon, t, y))
    return Dataset(obs), spec


@pytest.fixture(scope="module")
def fitted():
    d, spec = st_data(0)
    return d, ST.fit_est_gp(d, spec, restarts=1, seed=0)


def test_total_gram_is_sum_of_components():
    d, spec = st_data(1, nsite=3, per=5)
    X = Points.from_dataset(d)
    parts = ST.component_grams(spec, X, THETA)
    total = spec.gp.kernel_at(THETA).gram(X)
    assert np.max(np.abs(sum(parts.values()) - total)) <= 1e-14 * np.abs(total).max()


def test_components_sum_to_total(fitted):
    d, m = fitted
    grid = ST.field_grid([38.0, 40.0], [-75.0, -73.0], np.linspace(-6000, 1500, 8))
    comps = ST.decompose(m, grid)
    total = ST.predict_field(m, grid)
    assert set(comps) == {"common", "regional", "local", "linear"}
    np.testing.assert_allclose(sum(c.mean for c in comps.values()), total.mean, rtol=0, atol=1e-8)


def test_prediction_at_precise_datum():
    d, spec = st_data(2, nsite=3, per=6, ysd=1e-4)
    m = ST.condition_est_gp(d, spec, {**THETA, "white.s2": 1e-10})
    X = Points.from_dataset(d)
    np.testing.assert_allclose(ST.predict_field(m, X).mean, d.y, atol=1e-5)


def far_point_variances(fitted):
    d, m = fitted
    far = Points(np.array([0.0]), np.array([-40.0]), np.array([120.0]))
    v = ST.predict_field(m, far).sd[0] ** 2
    kern = m.kernel
    spatial = sum(m.spec.component_kernel(c, kern).diag(far)[0] for c in ("regional", "local", "linear"))
    _, Cg = m.model.cond.field(m.spec.component_kernel("common", kern), far)
    return v, spatial, Cg[0, 0], m.spec.component_kernel("common", kern).diag(far)[0]


def test_far_from_data_spatial_terms_revert_to_prior(fitted):
    v, spatial, g_post, _ = far_point_variances(fitted)
    assert v == pytest.approx(spatial + g_post, rel=1e-9)


@pytest.mark.xfail(strict=True, reason="the common term has no spatial decay, so distant data still constrain it")
def test_far_from_data_full_prior_reversion(fitted):
    v, spatial, _, g_prior = far_point_variances(fitted)
    assert v == pytest.approx(spatial + g_prior, rel=0.01)


def test_dense_site_more_certain_than_distant_point(fitted):
    d, m = fitted
    lat, lon = d.lat[0], d.lon[0]
    near = ST.field_grid([lat], [lon], [-3000.0])
    far = ST.field_grid([lat + 20.0], [lon], [-3000.0])
    assert ST.predict_field(m, near).sd[0] < ST.predict_field(m, far).sd[0]


def test_observation_order_does_not_matter():
    d, spec = st_data(3, nsite=4, per=6)
    perm = np.random.default_rng(0).permutation(len(d))
    dp = Dataset(tuple(d.observations[i] for i in perm))
    grid = ST.field_grid([37.0, 39.5], [-76.0, -74.0], np.linspace(-7000, 1000, 5))
    a = ST.condition_est_gp(d, spec, THETA)
    b = ST.condition_est_gp(dp, spec, THETA)
    assert a.log_likelihood == pytest.approx(b.log_likelihood, abs=1e-10)
    pa, pb = ST.predict_field(a, grid), ST.predict_field(b, grid)
    np.testing.assert_allclose(pa.mean, pb.mean, rtol=0, atol=1e-10)
    np.testing.assert_allclose(pa.cov, pb.cov, rtol=0, atol=1e-10)


def test_pure_common_signal_leaves_spatial_terms_near_zero():
    rng = np.random.default_rng(4)
    lat, lon = np.array([37.0, 39.0, 41.0]), np.array([-76.0, -74.0, -72.0])
    t = rng.uniform(-8000, 2000, (3, 15))
    g = K.Matern(1.0, 3000.0, 1.5)
    tt = t.ravel()
    L, _ = K.cholesky(g.gram(Points(tt)))
    y = L @ rng.standard_normal(tt.size) + 0.05 * rng.standard_normal(tt.size)
    obs = tuple(Observation(f"S{i // 15}", lat[i // 15], lon[i // 15], tt[i], 0.0, y[i], 0.05)
                for i in range(tt.size))
    m = ST.condition_est_gp(Dataset(obs), ST.StGpSpec.default(), THETA)
    grid = ST.field_grid(lat, lon, np.linspace(-7000, 1000, 9))
    comps = ST.decompose(m, grid)
    for name in ("regional", "local"):
        c = comps[name]
        assert np.all(np.abs(c.mean) < 2 * c.sd)


@pytest.mark.xfail(strict=True, reason="at zero separation local and regional terms are not separately identifiable")
def test_co_located_twins_push_local_amplitude_down():
    rng = np.random.default_rng(5)
    t = np.sort(rng.uniform(-8000, 2000, 25))
    g = K.Matern(1.0, 3000.0, 1.5)
    L, _ = K.cholesky(g.gram(Points(t)))
    f = L @ rng.standard_normal(t.size)
    obs = []
    for s in ("A", "B"):
        y = f + 0.05 * rng.standard_normal(t.size)
        obs += [Observation(s, 39.0, -74.0, ti, 0.0, yi, 0.05) for ti, yi in zip(t, y)]
    m = ST.fit_est_gp(Dataset(tuple(obs)), restarts=1, seed=0)
    lo = ST.StGpSpec.default().gp.bounds["local.s2"][0]
    assert m.theta["local.s2"] <= 100 * lo


def test_rate_field_is_gp_rate_transform(fitted):
    _, m = fitted
    grid = ST.field_grid([38.0], [-74.0], np.linspace(-5000, 0, 11))
    p = ST.predict_field(m, grid)
    r = ST.rate_field(p, 1000.0)
    want = gp.rate_transform(p, 1000.0)
    np.testing.assert_array_equal(r.mean, want.mean)
    assert r.kind == "rate"


def test_map_grid_covers_bounding_box(fitted):
    d, _ = fitted
    g = ST.map_grid(d, [0.0, 1000.0], step=0.5)
    assert g.lat.min() <= d.lat.min() and g.lat.max() >= d.lat.max()
    assert g.lon.min() <= d.lon.min() and g.lon.max() >= d.lon.max()
    assert len(g) % 2 == 0


def test_errors():
    d, spec = st_data(6, nsite=2, per=4)
    with pytest.raises(SizeError, match="O\\(n\\^3\\)"):
        ST.fit_est_gp(d, ST.StGpSpec(spec.gp, max_n=5))
    one = Dataset(tuple(o for o in d.observations if o.site_id == "S0"))
    with pytest.raises(InsufficientDataError):
        ST.fit_est_gp(one, spec)
    bad = dict(spec.gp.bounds)
    bad["regional_space.l"] = (0.1, 15.0)
    with pytest.raises(ConfigurationError):
        ST.StGpSpec(gp.GpModelSpec(spec.gp.kernel, bad, "constant"))
    with pytest.raises(ConfigurationError):
        ST.StGpSpec(gp.GpModelSpec(K.Matern(), {}, "constant"))


def test_regional_length_recovered():
    # three sites a regional length or so apart; non-regional terms held at the truth
    hits = 0
    reps = 30
    for seed in range(reps):
        d, spec = st_data(100 + seed, nsite=3, per=20, theta={**THETA, "regional.s2": 1.0},
                          lat=[36.0, 39.0, 42.0], lon=[-77.0, -74.0, -71.0])
        free = {k: spec.gp.bounds[k] for k in ("common.s2", "regional.s2", "regional.l", "regional_space.l")}
        truth = spec.gp.kernel_at({**THETA, "regional.s2": 1.0})
        m = ST.fit_est_gp(d, ST.StGpSpec(gp.GpModelSpec(truth, free, spec.gp.mean)), restarts=1, seed=seed)
        hits += 0.5 <= m.theta["regional_space.l"] / THETA["regional_space.l"] <= 2.0
    assert hits / reps >= 0.7
