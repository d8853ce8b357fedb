"""Building blocks shared by the command line, the scripts and the acceptance suite.

A *pipeline* is a callable ``(train_truth, test_truth) -> prediction`` that
fits on the training days and predicts the fine maps of the test days from
their coarse aggregates only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from popmap.baselines import BaselineHyper, build_pixel_dataset, fit_predict, rows_to_cube
from popmap.citygen import CityModel, FunctionClass, generate_city, generate_population, simulate_device_records
from popmap.config import ExperimentConfig
from popmap.preprocess import (
    DISTRICT,
    FINE,
    STREET_BLOCK,
    PoiGrid,
    PopCube,
    ZonePartition,
    activation_correct,
    aggregate,
    rasterize,
    voronoi_weights,
)
from popmap.spatial import ALL_POIS, SrcnnHyper, StackedMapper, build_ladder
from popmap.temporal import TemporalHyper, TemporalModel, smooth_cube, train_temporal

logger = logging.getLogger(__name__)


@dataclass
class World:
    city: CityModel
    truth: PopCube
    ladder: list[ZonePartition]

    @property
    def pois(self) -> PoiGrid:
        return self.city.poi_grid()

    @property
    def mask(self) -> np.ndarray:
        return self.city.mask

    def zones(self, level: str) -> ZonePartition:
        return next(z for z in self.ladder if z.level == level)


def build_world(cfg: ExperimentConfig) -> World:
    city = generate_city(cfg.seed, config=cfg.city)
    truth = generate_population(city, cfg.seed)
    return World(city, truth, build_ladder(city.zones, cfg.seed))


def preprocess_records(world: World, dropout_profile, seed: int) -> tuple[PopCube, dict]:
    """Device records -> activation correction -> Voronoi raster, with a diagnostic summary."""
    records = simulate_device_records(world.truth, world.city, dropout_profile, seed)
    corrected, valid = activation_correct(records)
    weights = voronoi_weights(world.city.stations, world.mask)
    frames = rasterize(corrected, weights, world.mask.shape)
    raster = world.truth.with_frames(frames)
    totals = corrected.sum(axis=0)[valid]
    m = world.mask
    err = frames[:, m] - world.truth.frames[:, m]
    summary = {
        "frames": len(frames),
        "dropped_slots": int((~valid).sum()),
        "corrected_total_spread": float(np.ptp(totals) / totals.max()),
        "raster_total_error": float(np.max(np.abs(frames.sum(axis=(1, 2)) - corrected.sum(axis=0)) / corrected.sum(axis=0).max())),
        "raster_vs_truth_nrmse": float(np.sqrt(np.mean(err**2)) / world.truth.frames[:, m].mean()),
    }
    return raster, summary


class SrcnnPipeline:
    """Stacked mapper trained on the training days, applied from ``start`` to fine."""

    def __init__(self, world: World, hp: SrcnnHyper, selected=ALL_POIS, start: str = DISTRICT):
        self.world, self.hp, self.selected, self.start = world, hp, tuple(selected), start
        self.model: StackedMapper | None = None

    def fit(self, train: PopCube) -> StackedMapper:
        self.model = StackedMapper(self.selected, self.hp).fit(train.frames, self.world.pois, self.world.ladder, self.world.mask)
        return self.model

    def predict(self, test: PopCube, start: str | None = None) -> PopCube:
        start = start or self.start
        coarse = aggregate(test.frames, self.world.zones(start))
        return test.with_frames(self.model.map_level(coarse, self.world.pois, self.world.mask, start=start, stop=FINE))

    def __call__(self, train: PopCube, test: PopCube) -> PopCube:
        self.fit(train)
        return self.predict(test)


class BaselinePipeline:
    def __init__(self, world: World, method: str, hp: BaselineHyper, coarse_level: str = DISTRICT):
        self.world, self.method, self.hp, self.coarse_level = world, method, hp, coarse_level
        self.wall_time = 0.0

    def __call__(self, train: PopCube, test: PopCube) -> PopCube:
        zones = self.world.zones(self.coarse_level)
        pois = self.world.pois
        tr = build_pixel_dataset(train.with_frames(aggregate(train.frames, zones)), train, pois)
        te = build_pixel_dataset(test.with_frames(aggregate(test.frames, zones)), None, pois)
        pred, self.wall_time = fit_predict(self.method, tr, te, self.hp)
        return rows_to_cube(pred, te, test)


@dataclass
class TemporalOutputs:
    static: PopCube
    flat: PopCube
    time: PopCube
    models: dict[str, TemporalModel] = field(default_factory=dict)
    traces: dict[str, list[float]] = field(default_factory=dict)


def static_fine(world: World, mapper: StackedMapper, cube: PopCube) -> PopCube:
    """Street block -> fine static maps for every frame of ``cube``."""
    coarse = aggregate(cube.frames, world.zones(STREET_BLOCK))
    return cube.with_frames(mapper.map_level(coarse, world.pois, world.mask, start=STREET_BLOCK, stop=FINE))


def temporal_experiment(world: World, mapper: StackedMapper, train: PopCube, test: PopCube, hp: TemporalHyper) -> TemporalOutputs:
    """Static street-block -> fine maps, then flat and time-embedded LSTMs trained on the training days."""
    st_train, st_test = static_fine(world, mapper, train), static_fine(world, mapper, test)
    out = TemporalOutputs(st_test, None, None)  # type: ignore[arg-type]
    for name, use_time in (("flat", False), ("time", True)):
        model, trace = train_temporal(st_train, train, TemporalHyper(**{**hp.__dict__, "use_time": use_time}))
        setattr(out, name, smooth_cube(st_test, model))
        out.models[name], out.traces[name] = model, trace
    return out


def diurnal_range_ratio(pred: PopCube, truth: PopCube, cells: np.ndarray) -> float:
    """Median over (day, cell) of predicted daily range / true daily range."""
    days = len(truth) // 24
    p = pred.frames.reshape(days, 24, -1)[:, :, cells.ravel()]
    t = truth.frames.reshape(days, 24, -1)[:, :, cells.ravel()]
    rp, rt = np.ptp(p, axis=1), np.ptp(t, axis=1)
    ok = rt > 0
    return float(np.median(rp[ok] / rt[ok]))


def residential_cells(world: World) -> np.ndarray:
    return (world.city.function_class == FunctionClass.RESIDENTIAL) & world.mask
