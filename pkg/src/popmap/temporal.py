"""Temporal smoothing of static maps with one shared LSTM.

Each in-boundary cell contributes one 24-step series per day. At step t the
LSTM sees the static value (zero where unknown) concatenated with a learned
embedding of hour t; a linear head on the hidden state predicts the true
value. Series are divided by their own mean before entering the network so
dense and sparse cells share one set of weights. The whole series is fed in
one pass; predictions are not fed back.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from popmap import nn
from popmap.errors import InputError, ShapeError, StateError, TrainingError
from popmap.preprocess import PopCube
from popmap.tensor import Tensor, concat, no_grad

logger = logging.getLogger(__name__)

HOURS = 24


@dataclass
class TemporalHyper:
    embed_dim: int = 8
    hidden: int = 64
    use_time: bool = True
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 3e-3
    mask_rate: float = 0.05
    scale_floor: float = 0.5
    seed: int = 0


@dataclass
class RegionSeries:
    cell: tuple[int, int]
    values: np.ndarray
    known: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.known = np.ones(HOURS, bool) if self.known is None else np.asarray(self.known, bool)
        if self.values.shape != (HOURS,) or self.known.shape != (HOURS,):
            raise ShapeError("a region series has exactly 24 hourly values")
        if np.any(self.values < 0):
            raise InputError("population series must be non-negative")

    def filled(self) -> np.ndarray:
        return np.where(self.known, self.values, 0.0)


class TimeEmbedding(nn.Module):
    """24 x E table applied to one-hot hour vectors by a bias-free linear layer."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, identity: bool = False):
        if identity:
            if dim != HOURS:
                raise ShapeError("identity initialisation needs E = 24")
            table = np.eye(HOURS)
        else:
            table = (rng or np.random.default_rng(0)).normal(0, 1 / np.sqrt(dim), size=(HOURS, dim))
        self.table = Tensor(table, requires_grad=True)

    def one_hot(self, hours) -> np.ndarray:
        hours = np.atleast_1d(hours)
        return np.stack([nn.one_hot(int(h), HOURS) for h in hours])

    def __call__(self, hours) -> Tensor:
        return Tensor(self.one_hot(hours)) @ self.table


def embed_hour(embedding: TimeEmbedding, h: int) -> Tensor:
    if not 0 <= int(h) < HOURS:
        raise InputError(f"hour {h} outside 0..23")
    return embedding([h]).reshape(embedding.table.shape[1])


class TemporalModel(nn.Module):
    """LSTM + linear head; without ``use_time`` this is the flat-LSTM ablation."""

    def __init__(self, hp: TemporalHyper):
        rng = np.random.default_rng([hp.seed, 7])
        self.hp = hp
        f_in = 1 + (hp.embed_dim if hp.use_time else 0)
        if hp.use_time:
            self.embedding = TimeEmbedding(hp.embed_dim, rng)
        self.cell = nn.LSTMCell(f_in, hp.hidden, rng)
        self.head = nn.Linear(hp.hidden, 1, rng)
        self.floor = 1e-6
        self.trained = False

    def __call__(self, values: np.ndarray) -> Tensor:
        """Scaled predictions ``(B, 24)`` for scaled, zero-filled inputs ``(B, 24)``."""
        b = len(values)
        h = Tensor(np.zeros((b, self.hp.hidden)))
        c = Tensor(np.zeros((b, self.hp.hidden)))
        if self.hp.use_time:
            table = self.embedding(np.arange(HOURS))
            ones = Tensor(np.ones((b, 1)))
        outs = []
        for t in range(HOURS):
            x = Tensor(values[:, t : t + 1])
            if self.hp.use_time:
                x = concat([x, ones @ table[t : t + 1]], axis=1)
            h, c = self.cell(x, h, c)
            outs.append(self.head(h))
        return concat(outs, axis=1)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def predict(self, series: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """Unscaled non-negative predictions for zero-filled series ``(B, 24)``."""
        if not self.trained:
            raise StateError("temporal model is not trained")
        series = np.asarray(series, dtype=np.float64)
        scale = series_scale(series, self.floor)
        out = np.empty_like(series)
        with no_grad():
            for s in range(0, len(series), chunk):
                out[s : s + chunk] = self(series[s : s + chunk] / scale[s : s + chunk, None]).data
        return np.maximum(out * scale[:, None], 0.0)


def series_scale(series: np.ndarray, floor: float) -> np.ndarray:
    """Per-series mean, floored so near-empty cells do not blow up after division."""
    return np.maximum(series.mean(axis=-1), floor)


def cube_to_series(cube: PopCube) -> tuple[np.ndarray, np.ndarray]:
    """``(days x cells, 24)`` in-boundary series plus their (day, flat cell) index."""
    if len(cube) % HOURS or np.any(cube.hours.reshape(-1, HOURS) != np.arange(HOURS)):
        raise ShapeError("cube must hold whole days of 24 hourly frames")
    days = len(cube) // HOURS
    cells = np.flatnonzero(cube.mask.ravel())
    f = cube.frames.reshape(days, HOURS, -1)[:, :, cells]  # (D, 24, n)
    series = f.transpose(0, 2, 1).reshape(-1, HOURS)
    index = np.stack(np.meshgrid(np.arange(days), cells, indexing="ij"), axis=-1).reshape(-1, 2)
    return series, index


def train_temporal(static: PopCube, truth: PopCube, hp: TemporalHyper | None = None) -> tuple[TemporalModel, list[float]]:
    """Fit one shared model mapping static series to true series; returns model and loss trace."""
    hp = hp or TemporalHyper()
    if static.frames.shape != truth.frames.shape or list(static.timestamps) != list(truth.timestamps):
        raise ShapeError("static and truth cubes are not aligned")
    if not np.array_equal(static.mask, truth.mask):
        raise ShapeError("static and truth cubes have different boundaries")
    x, _ = cube_to_series(static)
    y, _ = cube_to_series(truth)
    model = TemporalModel(hp)
    model.floor = max(hp.scale_floor * float(x.mean()), 1e-6)
    scale = series_scale(x, model.floor)
    x, y = x / scale[:, None], y / scale[:, None]
    opt = nn.Adam(model.parameters(), lr=hp.lr)
    rng = np.random.default_rng([hp.seed, 11])
    batches = nn.iter_batches(len(x), hp.batch_size, rng)
    trace: list[float] = []
    for it in range(hp.iterations):
        idx = next(batches)
        xb = x[idx]
        if hp.mask_rate > 0:
            xb = np.where(rng.uniform(size=xb.shape) < hp.mask_rate, 0.0, xb)
        opt.zero_grad()
        loss = nn.mse_loss(model(xb), Tensor(y[idx]))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite temporal loss at iteration {it} (lr={hp.lr})")
        loss.backward()
        opt.step()
        trace.append(value)
    model.trained = True
    logger.info("temporal model (time=%s): %d series, final loss %.4g", hp.use_time, len(x), np.mean(trace[-50:]))
    return model, trace


def smooth_series(series: RegionSeries, model: TemporalModel) -> np.ndarray:
    return model.predict(series.filled()[None])[0]


def smooth_cube(static: PopCube, model: TemporalModel) -> PopCube:
    """Apply the model to every in-boundary cell of every day; outside stays 0."""
    series, index = cube_to_series(static)
    pred = model.predict(series)
    days = len(static) // HOURS
    out = np.zeros((days, HOURS, static.mask.size))
    out[index[:, 0], :, index[:, 1]] = pred
    return static.with_frames(out.reshape(static.frames.shape))


# -- persistence -----------------------------------------------------------------------


def save_temporal(model: TemporalModel, directory: str | Path, extra: dict | None = None) -> None:
    if not model.trained:
        raise StateError("refusing to save an untrained temporal model")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(d / "temporal.ndt", model.state_dict())
    manifest = {
        "model": "lstm-time-embedding" if model.hp.use_time else "flat-lstm",
        "embed_dim": model.hp.embed_dim,
        "hidden": model.hp.hidden,
        "scaling": "series-mean",
        "scale_floor": model.floor,
        "seed": model.hp.seed,
        "hyperparameters": asdict(model.hp),
        "checkpoint": "temporal.ndt",
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_temporal(directory: str | Path) -> TemporalModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = TemporalModel(TemporalHyper(**manifest["hyperparameters"]))
    model.load_state_dict(nn.load_checkpoint(d / manifest["checkpoint"]))
    model.floor = float(manifest["scale_floor"])
    model.trained = True
    return model
