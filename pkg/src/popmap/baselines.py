"""Pixelwise regression baselines: lasso, decision tree, random forest and a small MLP.

Each in-boundary cell of each frame is one row: the co-located coarse value
plus the four PoI counts, predicting the fine value. Population features and
targets live in log(1 + x) space when ``log_transform`` is set.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.linear_model import Lasso
from sklearn.tree import DecisionTreeRegressor

from popmap import nn
from popmap.errors import InputError, ShapeError
from popmap.preprocess import PoiGrid, PopCube
from popmap.tensor import Tensor, no_grad, relu

METHODS = ("lasso", "tree", "forest", "mlp")
RESULT_COLUMNS = ("method", "level_pair", "fold", "RMSE", "NRMSE", "Corr", "MAE", "wall_time_s")


@dataclass
class BaselineHyper:
    lasso_alpha: float = 1e-3
    tree_min_leaf: int = 1
    forest_trees: int = 100
    forest_max_features: str = "sqrt"
    forest_min_leaf: int = 2
    mlp_hidden: int = 64
    mlp_iterations: int = 1500
    mlp_batch: int = 256
    mlp_lr: float = 1e-3
    n_jobs: int = 1
    seed: int = 0


@dataclass
class PixelDataset:
    features: np.ndarray
    target: np.ndarray | None
    log_transform: bool
    cells: np.ndarray
    n_frames: int

    def __len__(self) -> int:
        return len(self.features)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        """Back to persons per cell, floored at 0."""
        out = np.expm1(values) if self.log_transform else np.asarray(values, dtype=np.float64)
        return np.maximum(out, 0.0)


def build_pixel_dataset(coarse: PopCube, fine: PopCube | None, pois: PoiGrid, log_transform: bool = True) -> PixelDataset:
    """Rows of ``[coarse, 4 PoI counts] -> fine`` over in-boundary cells of every frame."""
    mask = coarse.mask
    if pois.shape != mask.shape:
        raise ShapeError(f"PoI grid {pois.shape} vs cube {mask.shape}")
    if fine is not None and (fine.frames.shape != coarse.frames.shape or list(fine.timestamps) != list(coarse.timestamps)):
        raise ShapeError("coarse and fine cubes are not aligned")
    t = len(coarse)
    cells = np.flatnonzero(mask.ravel())
    pop = coarse.frames.reshape(t, -1)[:, cells].ravel()
    poi = np.tile(pois.counts.reshape(4, -1)[:, cells].T.astype(np.float64), (t, 1))
    f = np.log1p(pop) if log_transform else pop
    features = np.column_stack([f, poi])
    target = None
    if fine is not None:
        y = fine.frames.reshape(t, -1)[:, cells].ravel()
        target = np.log1p(y) if log_transform else y
    if not np.all(np.isfinite(features)):
        raise InputError("non-finite features")
    return PixelDataset(features, target, log_transform, cells, t)


def rows_to_cube(values: np.ndarray, data: PixelDataset, template: PopCube) -> PopCube:
    out = np.zeros((data.n_frames, template.mask.size))
    out[:, data.cells] = values.reshape(data.n_frames, -1)
    return template.with_frames(out.reshape(template.frames.shape))


class PixelMLP(nn.Module):
    def __init__(self, f_in: int, hidden: int, rng: np.random.Generator):
        self.l1 = nn.Linear(f_in, hidden, rng)
        self.l2 = nn.Linear(hidden, hidden, rng)
        self.out = nn.Linear(hidden, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(relu(self.l2(relu(self.l1(x)))))


def _fit_mlp(train: PixelDataset, hp: BaselineHyper):
    mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    y_mu, y_sd = train.target.mean(), max(train.target.std(), 1e-12)
    x = (train.features - mu) / sd
    y = ((train.target - y_mu) / y_sd)[:, None]
    rng = np.random.default_rng([hp.seed, 3])
    model = PixelMLP(x.shape[1], hp.mlp_hidden, rng)
    opt = nn.Adam(model.parameters(), lr=hp.mlp_lr)
    batches = nn.iter_batches(len(x), hp.mlp_batch, rng)
    for _ in range(hp.mlp_iterations):
        idx = next(batches)
        opt.zero_grad()
        nn.mse_loss(model(Tensor(x[idx])), Tensor(y[idx])).backward()
        opt.step()

    def predict(features: np.ndarray) -> np.ndarray:
        with no_grad():
            return model(Tensor((features - mu) / sd)).data[:, 0] * y_sd + y_mu

    return predict


def make_estimator(method: str, hp: BaselineHyper):
    if method == "lasso":
        return Lasso(alpha=hp.lasso_alpha, max_iter=10000)
    if method == "tree":
        return DecisionTreeRegressor(min_samples_leaf=hp.tree_min_leaf, random_state=hp.seed)
    if method == "forest":
        return RandomForestRegressor(
            n_estimators=hp.forest_trees,
            max_features=hp.forest_max_features,
            min_samples_leaf=hp.forest_min_leaf,
            random_state=hp.seed,
            n_jobs=hp.n_jobs,
        )
    raise ValueError(f"unknown baseline method {method!r}; expected one of {METHODS}")


def fit_predict(method: str, train: PixelDataset, test: PixelDataset, hp: BaselineHyper | None = None) -> tuple[np.ndarray, float]:
    """Fit on ``train`` and predict ``test`` rows in persons; returns predictions and wall time."""
    hp = hp or BaselineHyper()
    if len(train) == 0 or train.target is None:
        raise InputError("baseline needs a non-empty labelled training set")
    if train.log_transform != test.log_transform:
        raise InputError("train and test datasets use different transforms")
    start = time.perf_counter()
    if method == "mlp":
        raw = _fit_mlp(train, hp)(test.features)
    else:
        if np.ptp(train.target) == 0:
            raw = np.full(len(test), train.target[0])
        else:
            raw = make_estimator(method, hp).fit(train.features, train.target).predict(test.features)
    return test.inverse(raw), time.perf_counter() - start


def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in RESULT_COLUMNS})
