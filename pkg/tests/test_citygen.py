import numpy as np
import pytest

from popmap.citygen import (
    CityConfig,
    FunctionClass,
    POICategory,
    generate_city,
    generate_population,
    load_city,
    nearest_station,
    rle_decode,
    rle_encode,
    save_city,
    simulate_device_records,
)
from popmap.errors import ConfigError
from popmap.preprocess import DISTRICT, FINE, STREET_BLOCK, activation_correct, voronoi_weights


@pytest.fixture(scope="module")
def city():
    return generate_city(7)


@pytest.fixture(scope="module")
def truth(city):
    return generate_population(city, seed=7)


def test_same_seed_identical(city, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_city(city, a)
    save_city(generate_city(7), b)
    assert a.read_bytes() == b.read_bytes()
    save_city(generate_city(8), b)
    assert a.read_bytes() != b.read_bytes()


def test_city_json_roundtrip(city, tmp_path):
    path = tmp_path / "city.json"
    save_city(city, path)
    back = load_city(path)
    np.testing.assert_array_equal(back.stations, city.stations)
    np.testing.assert_array_equal(back.zones[STREET_BLOCK].labels, city.zones[STREET_BLOCK].labels)
    np.testing.assert_array_equal(back.function_class, city.function_class)
    np.testing.assert_array_equal(back.poi_categories, city.poi_categories)
    assert back.config == city.config


def test_rle_roundtrip():
    a = np.array([[0, 0, 1], [1, 1, -1]])
    runs = rle_encode(a)
    assert runs == [0, 2, 1, 3, -1, 1]
    np.testing.assert_array_equal(rle_decode(runs, a.shape), a)


def test_city_invariants(city):
    x0, y0, x1, y1 = city.bounds
    for pts in (city.stations, city.poi_points):
        assert np.all((pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1))
    d, b, f = (city.zones[k] for k in (DISTRICT, STREET_BLOCK, FINE))
    assert d.n_zones < b.n_zones < f.n_zones
    for z in (d, b):
        np.testing.assert_array_equal(z.mask, city.mask)
    assert b.is_nested_in(d) and f.is_nested_in(b)
    assert len(POICategory) == 4
    assert city.base_density[city.downtown_center] == city.base_density.max()


def test_paper_scale_grid():
    city = generate_city(1, grid_h=83, grid_w=114, n_stations=200)
    assert city.shape == (83, 114)
    assert city.mask.mean() > 0.5


def _density_at_stations(city):
    r = np.clip(city.stations[:, 1].astype(int), 0, city.shape[0] - 1)
    c = np.clip(city.stations[:, 0].astype(int), 0, city.shape[1] - 1)
    return city.base_density[r, c].mean()


def test_stations_cluster_on_density(city):
    assert _density_at_stations(city) > 1.2 * city.base_density[city.mask].mean()
    uniform = [
        _density_at_stations(generate_city(s, config=CityConfig(station_layout="uniform"))) for s in range(3)
    ]
    clustered = [_density_at_stations(generate_city(s)) for s in range(3)]
    assert np.mean(clustered) > 1.2 * np.mean(uniform)


def test_poi_mix_follows_function_class(city):
    grid = city.poi_grid().counts
    res = city.function_class == FunctionClass.RESIDENTIAL
    work = city.function_class == FunctionClass.WORKPLACE
    share = lambda sel, cat: grid[cat][sel].sum() / grid[:, sel].sum()
    assert share(res, POICategory.RESIDENCE) > 2 * share(work, POICategory.RESIDENCE)
    assert share(work, POICategory.BUSINESS) > 2 * share(res, POICategory.BUSINESS)


def test_four_uniform_stations_each_own_cells():
    city = generate_city(3, n_stations=4, config=CityConfig(station_layout="uniform"))
    w = voronoi_weights(city.stations, city.mask)
    assert np.all(np.diff(w.indptr) >= 1)
    owner = nearest_station(city.stations, city.shape)
    assert len(np.unique(owner[city.mask])) == 4


@pytest.mark.parametrize(
    "kwargs",
    [dict(grid_h=8), dict(n_stations=3), dict(config=CityConfig(n_districts=80, n_blocks=64))],
)
def test_degenerate_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        generate_city(0, **kwargs)


def test_population_basic_properties(city, truth):
    assert truth.frames.shape == (24 * city.config.n_days,) + city.shape
    assert np.all(truth.frames >= 0)
    assert np.all(truth.frames[:, ~city.mask] == 0)


def test_residential_lower_at_noon_than_late_evening(city, truth):
    res = (city.function_class == FunctionClass.RESIDENTIAL) & city.mask
    day0 = truth.frames[:24]
    assert np.all(day0[12][res] < day0[23][res])
    work = (city.function_class == FunctionClass.WORKPLACE) & city.mask
    assert np.all(day0[12][work] > day0[3][work])


def test_city_total_stable_within_day(truth):
    totals = truth.frames.sum(axis=(1, 2)).reshape(-1, 24)
    assert np.all(np.abs(totals[:, 3] - totals[:, 15]) / totals[:, 3] < 0.02)


def test_zero_noise_days_identical(city):
    cube = generate_population(city, seed=1, n_days=3, zero_noise=True)
    days = cube.frames.reshape(3, 24, *city.shape)
    np.testing.assert_array_equal(days[0], days[1])
    np.testing.assert_array_equal(days[0], days[2])


def test_records_without_dropout_equal_station_aggregation(city, truth):
    rec = simulate_device_records(truth, city, np.ones(24))
    owner = nearest_station(city.stations, city.shape)
    m = city.mask
    for t in (0, 13, 40):
        expect = np.bincount(owner[m], weights=truth.frames[t][m], minlength=len(city.stations))
        np.testing.assert_allclose(rec[:, t], expect, rtol=1e-12)


def test_half_dropout_within_three_sigma(city, truth):
    profile = np.ones(24)
    profile[9] = 0.5
    rec = simulate_device_records(truth, city, profile, seed=5)
    full = np.round(simulate_device_records(truth, city, np.ones(24))).sum(axis=0)
    for t in np.flatnonzero(truth.hours == 9):
        n = full[t]
        assert abs(rec[:, t].sum() - 0.5 * n) < 3 * np.sqrt(n * 0.25)


def test_closed_loop_activation_correction(city, truth):
    profile = 0.55 + 0.4 * np.cos(np.linspace(0, 2 * np.pi, 24, endpoint=False)) ** 2
    rec = simulate_device_records(truth, city, profile, seed=2)
    y, valid = activation_correct(rec)
    totals = y.sum(axis=0)[valid]
    np.testing.assert_allclose(totals, rec.sum(axis=0).max(), rtol=1e-9)


def test_dropout_profile_validated(city, truth):
    with pytest.raises(ConfigError):
        simulate_device_records(truth, city, np.zeros(24))
    with pytest.raises(ConfigError):
        simulate_device_records(truth, city, np.ones(23))
