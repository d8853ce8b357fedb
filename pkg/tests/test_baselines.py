import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popmap.baselines import (
    METHODS,
    RESULT_COLUMNS,
    BaselineHyper,
    PixelDataset,
    build_pixel_dataset,
    fit_predict,
    rows_to_cube,
    write_results_csv,
)
from popmap.citygen import CityConfig, generate_city, generate_population
from popmap.errors import InputError, ShapeError
from popmap.preprocess import aggregate

FAST = BaselineHyper(forest_trees=10, mlp_iterations=100)


@pytest.fixture(scope="module")
def world():
    city = generate_city(5, config=CityConfig(grid_h=16, grid_w=16, n_stations=12, n_districts=3, n_blocks=16, n_days=2))
    truth = generate_population(city, 5)
    coarse = truth.with_frames(aggregate(truth.frames, city.zones["district"]))
    return city, truth, coarse


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_log_transform_roundtrip(values):
    x = np.array(values)
    ds = PixelDataset(np.zeros((len(x), 5)), None, True, np.arange(len(x)), 1)
    np.testing.assert_allclose(ds.inverse(np.log1p(x)), x, rtol=1e-12, atol=1e-12)


def test_dataset_shape(world):
    city, truth, coarse = world
    ds = build_pixel_dataset(coarse, truth, city.poi_grid())
    assert ds.features.shape == (city.mask.sum() * len(truth), 5)
    assert len(ds.target) == len(ds)
    np.testing.assert_allclose(ds.features[:, 0], np.log1p(coarse.frames[:, city.mask].ravel()))
    raw = build_pixel_dataset(coarse, truth, city.poi_grid(), log_transform=False)
    np.testing.assert_array_equal(raw.target, truth.frames[:, city.mask].ravel())


def test_dataset_rejects_misaligned(world):
    city, truth, coarse = world
    with pytest.raises(ShapeError):
        build_pixel_dataset(coarse, truth.select(days=[0]), city.poi_grid())


def test_rows_to_cube_roundtrip(world):
    city, truth, coarse = world
    ds = build_pixel_dataset(coarse, truth, city.poi_grid(), log_transform=False)
    np.testing.assert_array_equal(rows_to_cube(ds.target, ds, truth).frames, truth.frames)


def test_tree_reproduces_training_data(world):
    city, truth, _ = world
    # fine map as its own input: every row is unique, so an unpruned tree memorises it
    ds = build_pixel_dataset(truth, truth, city.poi_grid())
    pred, _ = fit_predict("tree", ds, ds, FAST)
    target = truth.frames[:, city.mask].ravel()
    assert np.sqrt(np.mean((pred - target) ** 2)) < 1e-6 * target.mean()


def test_lasso_large_alpha_predicts_mean(world):
    city, truth, coarse = world
    ds = build_pixel_dataset(coarse, truth, city.poi_grid())
    pred, _ = fit_predict("lasso", ds, ds, BaselineHyper(lasso_alpha=1e6))
    np.testing.assert_allclose(pred, np.expm1(ds.target.mean()), rtol=1e-9)


def test_constant_target_gives_constant_prediction():
    feats = np.random.default_rng(0).normal(size=(20, 5))
    ds = PixelDataset(feats, np.full(20, np.log1p(7.0)), True, np.arange(20), 1)
    for method in ("lasso", "tree", "forest"):
        pred, _ = fit_predict(method, ds, ds, FAST)
        np.testing.assert_allclose(pred, 7.0)


def test_forest_not_worse_than_tree():
    for seed in range(3):
        city = generate_city(seed, config=CityConfig(grid_h=16, grid_w=16, n_stations=12, n_districts=3, n_blocks=16, n_days=3))
        truth = generate_population(city, seed)
        coarse = truth.with_frames(aggregate(truth.frames, city.zones["street_block"]))
        tr = build_pixel_dataset(coarse.select(days=[0, 1]), truth.select(days=[0, 1]), city.poi_grid())
        te = build_pixel_dataset(coarse.select(days=[2]), None, city.poi_grid())
        target = truth.select(days=[2]).frames[:, city.mask].ravel()
        hp = BaselineHyper(forest_trees=30, seed=seed)
        err = {m: np.sqrt(np.mean((fit_predict(m, tr, te, hp)[0] - target) ** 2)) for m in ("tree", "forest")}
        assert err["forest"] <= err["tree"]


@pytest.mark.parametrize("method", METHODS)
def test_predictions_nonnegative_and_deterministic(world, method):
    city, truth, coarse = world
    tr = build_pixel_dataset(coarse.select(days=[0]), truth.select(days=[0]), city.poi_grid())
    te = build_pixel_dataset(coarse.select(days=[1]), None, city.poi_grid())
    a, wall = fit_predict(method, tr, te, FAST)
    b, _ = fit_predict(method, tr, te, FAST)
    assert a.shape == (len(te),)
    assert np.all(a >= 0) and wall >= 0
    np.testing.assert_array_equal(a, b)


def test_unknown_method_and_empty_training(world):
    city, truth, coarse = world
    ds = build_pixel_dataset(coarse, truth, city.poi_grid())
    with pytest.raises(ValueError):
        fit_predict("svm", ds, ds)
    with pytest.raises(InputError):
        fit_predict("tree", build_pixel_dataset(coarse, None, city.poi_grid()), ds)


def test_results_csv(tmp_path):
    row = dict(method="tree", level_pair="X1-X3", fold=0, RMSE=1.5, NRMSE=0.25, Corr=0.9, MAE=1.0, wall_time_s=0.01)
    write_results_csv(tmp_path / "r.csv", [row])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(RESULT_COLUMNS)
    assert lines[1] == "tree,X1-X3,0,1.5,0.25,0.9,1,0.01"
