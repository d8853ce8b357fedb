"""Seeded synthetic city: boundary, base stations, nested zones, PoIs and hourly population.

Everything the generator assumes (diurnal shapes, PoI affinities, noise
levels) lives in :class:`CityConfig`, so experiments can vary it without
touching code.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from popmap.errors import ConfigError
from popmap.preprocess import (
    DISTRICT,
    FINE,
    STREET_BLOCK,
    PoiGrid,
    PopCube,
    ZonePartition,
    coarsen,
    fine_partition,
    grid_pois,
    hourly_timestamps,
)


class POICategory(enum.IntEnum):
    ENTERTAINMENT = 0
    BUSINESS = 1
    TRANSPORTATION = 2
    RESIDENCE = 3


class FunctionClass(enum.IntEnum):
    RESIDENTIAL = 0
    WORKPLACE = 1
    TRANSIT = 2
    MIXED = 3
    SUBURB = 4


def _shape(night: float, morning: float, day: float, evening: float, late: float, peaks=()) -> list[float]:
    """Piecewise hourly multipliers: 0-5 night, 6-8 morning, 9-16 day, 17-20 evening, 21-23 late."""
    s = [night] * 6 + [morning] * 3 + [day] * 8 + [evening] * 4 + [late] * 3
    for hour, value in peaks:
        s[hour] = value
    return s


DEFAULT_SHAPES = {
    "residential": _shape(1.0, 0.75, 0.3, 0.7, 0.95, peaks=[(6, 0.95), (8, 0.5), (17, 0.45), (18, 0.6)]),
    "workplace": _shape(0.12, 0.45, 1.0, 0.55, 0.15, peaks=[(6, 0.15), (8, 0.8), (17, 0.8), (20, 0.25)]),
    "transit": _shape(0.2, 0.9, 0.5, 0.8, 0.3, peaks=[(7, 1.0), (8, 1.0), (17, 1.0), (18, 1.0)]),
    "mixed": _shape(0.45, 0.6, 0.85, 1.0, 0.7),
    "suburb": _shape(1.0, 0.95, 0.8, 0.9, 1.0),
}

# rows follow FunctionClass, columns POICategory
DEFAULT_AFFINITY = [
    [0.3, 0.15, 0.1, 2.0],
    [0.3, 2.0, 0.25, 0.1],
    [0.5, 0.3, 2.5, 0.1],
    [2.0, 0.7, 0.3, 0.5],
    [0.1, 0.1, 0.05, 0.7],
]

# class mix by distance ring (near, middle, far) in FunctionClass order
DEFAULT_CLASS_MIX = [
    [0.25, 0.35, 0.1, 0.3, 0.0],
    [0.45, 0.2, 0.05, 0.2, 0.1],
    [0.35, 0.1, 0.0, 0.05, 0.5],
]


@dataclass
class CityConfig:
    """Generator parameters. Defaults give the desk-scale city."""

    grid_h: int = 32
    grid_w: int = 32
    n_stations: int = 60
    pois_per_cell: float = 20.0
    n_districts: int = 6
    n_blocks: int = 64
    station_layout: str = "clustered"
    boundary_roughness: float = 0.12
    downtown_decay: float = 0.28
    subcenters: int = 2
    density_noise: float = 0.35
    neighbourhood_cells: float = 5.0
    class_level: list[float] = field(default_factory=lambda: [1.0, 1.4, 0.7, 1.0, 0.6])
    mean_density: float = 200.0
    n_days: int = 5
    day_noise: float = 0.08
    hourly_noise: float = 0.02
    shapes: dict[str, list[float]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SHAPES.items()})
    affinity: list[list[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_AFFINITY])
    class_mix: list[list[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_CLASS_MIX])

    def validate(self) -> None:
        if self.grid_h < 16 or self.grid_w < 16:
            raise ConfigError("grid must be at least 16x16")
        if self.n_stations < 4:
            raise ConfigError("need at least 4 stations")
        if self.station_layout not in ("clustered", "uniform"):
            raise ConfigError(f"unknown station layout {self.station_layout!r}")
        if not 1 <= self.n_districts < self.n_blocks:
            raise ConfigError("need 1 <= n_districts < n_blocks")
        for name in FunctionClass.__members__:
            shape = self.shapes.get(name.lower())
            if shape is None or len(shape) != 24 or min(shape) <= 0:
                raise ConfigError(f"hourly shape for {name.lower()} must be 24 positive values")
        if self.n_days < 1:
            raise ConfigError("n_days must be positive")


@dataclass
class RegionProfile:
    function_class: FunctionClass
    base_level: float
    hourly_shape: list[float]


@dataclass
class CityModel:
    bounds: tuple[float, float, float, float]
    stations: np.ndarray
    zones: dict[str, ZonePartition]
    poi_points: np.ndarray
    poi_categories: np.ndarray
    downtown_center: tuple[int, int]
    function_class: np.ndarray
    base_density: np.ndarray
    config: CityConfig
    seed: int = 0

    @property
    def mask(self) -> np.ndarray:
        return self.zones[FINE].mask

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def poi_grid(self) -> PoiGrid:
        return grid_pois(self.poi_points, self.poi_categories, self.shape)

    def profile(self, r: int, c: int) -> RegionProfile:
        cls = FunctionClass(int(self.function_class[r, c]))
        return RegionProfile(
            cls,
            float(self.base_density[r, c] * self.config.class_level[cls]),
            list(self.config.shapes[cls.name.lower()]),
        )


def generate_city(
    seed: int,
    grid_h: int | None = None,
    grid_w: int | None = None,
    n_stations: int | None = None,
    n_pois: int | None = None,
    config: CityConfig | None = None,
) -> CityModel:
    """Build a reproducible synthetic city.

    Explicit arguments override the matching ``config`` fields; ``n_pois``
    defaults to ``pois_per_cell`` times the in-boundary cell count.
    """
    cfg = CityConfig(**asdict(config)) if config is not None else CityConfig()
    if grid_h is not None:
        cfg.grid_h = grid_h
    if grid_w is not None:
        cfg.grid_w = grid_w
    if n_stations is not None:
        cfg.n_stations = n_stations
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.grid_h, cfg.grid_w
    yy, xx = np.mgrid[0:h, 0:w] + 0.5

    # boundary: a wobbly ellipse
    cy, cx = h / 2 + rng.uniform(-0.05, 0.05) * h, w / 2 + rng.uniform(-0.05, 0.05) * w
    u, v = (xx - cx) / (w / 2), (yy - cy) / (h / 2)
    theta = np.arctan2(v, u)
    wobble = sum(
        rng.uniform(0, 1) / k * np.cos(k * theta + rng.uniform(0, 2 * np.pi)) for k in range(2, 6)
    )
    mask = np.hypot(u, v) <= 0.95 * (1 + cfg.boundary_roughness * wobble)

    # base density: downtown plus a few subcentres, with smoothed lognormal texture
    scale = min(h, w)
    inside = np.argwhere(mask)
    centre_cell = inside[np.argmin(np.hypot(inside[:, 0] + 0.5 - cy, inside[:, 1] + 0.5 - cx))]
    dy, dx = centre_cell[0] + 0.5 + rng.normal(0, 0.05 * h), centre_cell[1] + 0.5 + rng.normal(0, 0.05 * w)
    density = np.exp(-np.hypot(yy - dy, xx - dx) / (cfg.downtown_decay * scale))
    for _ in range(cfg.subcenters):
        sy, sx = inside[rng.integers(len(inside))] + 0.5
        density += rng.uniform(0.3, 0.6) * np.exp(-np.hypot(yy - sy, xx - sx) / (0.1 * scale))
    texture = _smooth(rng.normal(size=(h, w)), passes=2)
    texture = (texture - texture.mean()) / texture.std()
    density *= np.exp(cfg.density_noise * texture)
    density = np.where(mask, density, 0.0)
    density *= cfg.mean_density * mask.sum() / density.sum()

    # function classes on small neighbourhood clusters, mix depending on distance ring
    fine = fine_partition(mask)
    n_hoods = max(int(round(mask.sum() / cfg.neighbourhood_cells)), cfg.n_blocks)
    hoods = coarsen(fine, None, min(n_hoods, fine.n_zones), rng, "neighbourhood")
    dist = np.hypot(yy - dy, xx - dx) / scale
    function_class = np.full((h, w), -1, dtype=np.int64)
    mix = np.asarray(cfg.class_mix, dtype=float)
    for z in range(hoods.n_zones):
        cells = hoods.labels == z
        d = dist[cells].mean()
        ring = 0 if d < 0.18 else (1 if d < 0.33 else 2)
        p = mix[ring] / mix[ring].sum()
        function_class[cells] = rng.choice(len(FunctionClass), p=p)

    # zones: districts then street blocks nested inside them
    districts = coarsen(fine, None, cfg.n_districts, rng, DISTRICT)
    blocks = coarsen(fine, districts, cfg.n_blocks, rng, STREET_BLOCK)

    # PoIs: intensity ~ sqrt(density) x class affinity
    aff = np.asarray(cfg.affinity, dtype=float)
    cls_idx = np.where(mask, function_class, 0)
    intensity = np.sqrt(density)[None] * aff[cls_idx].transpose(2, 0, 1) * mask[None]
    total_pois = int(n_pois if n_pois is not None else round(cfg.pois_per_cell * mask.sum()))
    flat = intensity.ravel() / intensity.sum()
    draws = rng.multinomial(total_pois, flat).reshape(intensity.shape)
    cat, rr, cc = np.nonzero(draws)
    reps = draws[cat, rr, cc]
    cat, rr, cc = np.repeat(cat, reps), np.repeat(rr, reps), np.repeat(cc, reps)
    poi_points = np.column_stack([cc + rng.uniform(0, 1, cc.size), rr + rng.uniform(0, 1, rr.size)])

    # stations: clustered on density, or uniform over the boundary
    cells = np.argwhere(mask)
    if cfg.station_layout == "clustered":
        p = density[mask] ** 1.5
        p = p / p.sum()
    else:
        p = np.full(len(cells), 1.0 / len(cells))
    replace = cfg.n_stations > len(cells)
    pick = rng.choice(len(cells), size=cfg.n_stations, replace=replace, p=p)
    stations = np.column_stack(
        [cells[pick, 1] + rng.uniform(0.05, 0.95, cfg.n_stations), cells[pick, 0] + rng.uniform(0.05, 0.95, cfg.n_stations)]
    )

    peak = np.unravel_index(np.argmax(density), density.shape)
    return CityModel(
        bounds=(0.0, 0.0, float(w), float(h)),
        stations=stations,
        zones={DISTRICT: districts, STREET_BLOCK: blocks, FINE: fine},
        poi_points=poi_points,
        poi_categories=cat.astype(np.int64),
        downtown_center=(int(peak[0]), int(peak[1])),
        function_class=function_class,
        base_density=density,
        config=cfg,
        seed=seed,
    )


def _smooth(a: np.ndarray, passes: int = 1) -> np.ndarray:
    for _ in range(passes):
        p = np.pad(a, 1, mode="edge")
        a = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] + 2 * p[1:-1, 1:-1]) / 6
    return a


def generate_population(city: CityModel, seed: int, n_days: int | None = None, zero_noise: bool = False) -> PopCube:
    """Hourly fine-grained ground truth for ``n_days`` weekdays (24 frames each).

    Each cell follows ``base_level x hourly_shape(class) x day noise``; every
    frame is then rescaled so the city total stays at that day's population.
    """
    cfg = city.config
    days = n_days or cfg.n_days
    rng = np.random.default_rng(seed)
    mask = city.mask
    cls = np.where(mask, city.function_class, 0)
    level = city.base_density * np.asarray(cfg.class_level)[cls]
    shapes = np.array([cfg.shapes[c.name.lower()] for c in FunctionClass])  # (5, 24)
    day_sigma = 0.0 if zero_noise else cfg.day_noise
    hour_sigma = 0.0 if zero_noise else cfg.hourly_noise
    total = city.base_density.sum()

    frames = np.zeros((days, 24) + mask.shape)
    for d in range(days):
        noise = np.exp(rng.normal(0, day_sigma, size=mask.shape) - day_sigma**2 / 2)
        day_total = total * np.exp(rng.normal(0, day_sigma / 4))
        for hour in range(24):
            jitter = np.exp(rng.normal(0, hour_sigma, size=mask.shape) - hour_sigma**2 / 2)
            raw = level * shapes[cls, hour] * noise * jitter * mask
            frames[d, hour] = raw * (day_total / raw.sum())
    return PopCube(frames.reshape(days * 24, *mask.shape), hourly_timestamps(days), FINE, mask)


def simulate_device_records(
    truth: PopCube,
    city: CityModel,
    dropout_profile,
    seed: int = 0,
) -> np.ndarray:
    """Per-station observed device counts ``(stations, T)``.

    Each cell's population goes to its nearest station; the station total is
    then binomially thinned by the activity fraction for that frame's hour.
    An activity fraction of exactly 1 passes the totals through unchanged.
    """
    profile = np.asarray(dropout_profile, dtype=float)
    if profile.shape != (24,) or np.any(profile <= 0) or np.any(profile > 1):
        raise ConfigError("dropout_profile must be 24 values in (0, 1]")
    owner = nearest_station(city.stations, city.shape)
    m = truth.mask
    n = len(city.stations)
    agg = np.stack([np.bincount(owner[m], weights=f[m], minlength=n) for f in truth.frames], axis=1)
    rng = np.random.default_rng(seed)
    out = agg.copy()
    for t, hour in enumerate(truth.hours):
        p = profile[hour]
        if p < 1.0:
            out[:, t] = rng.binomial(np.round(agg[:, t]).astype(np.int64), p)
    return out


def nearest_station(stations: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Index of the station nearest each cell centre."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d2 = (xx[..., None] - stations[:, 0]) ** 2 + (yy[..., None] - stations[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


# -- JSON serialisation --------------------------------------------------------------


def rle_encode(a: np.ndarray) -> list[int]:
    flat = np.asarray(a).ravel()
    out: list[int] = []
    if flat.size == 0:
        return out
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    for s, e in zip(starts, ends):
        out.extend([int(flat[s]), int(e - s)])
    return out


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    vals = np.asarray(runs[0::2], dtype=np.int64)
    lens = np.asarray(runs[1::2], dtype=np.int64)
    return np.repeat(vals, lens).reshape(shape)


def city_to_dict(city: CityModel) -> dict:
    return {
        "format": "popmap-city-1",
        "seed": city.seed,
        "bounds": list(city.bounds),
        "shape": list(city.shape),
        "stations": city.stations.tolist(),
        "zones": {name: rle_encode(z.labels) for name, z in city.zones.items()},
        "function_class": rle_encode(city.function_class),
        "pois": [[float(x), float(y), int(c)] for (x, y), c in zip(city.poi_points, city.poi_categories)],
        "downtown_center": list(city.downtown_center),
        "base_density": city.base_density.tolist(),
        "config": asdict(city.config),
    }


def city_from_dict(doc: dict) -> CityModel:
    shape = tuple(doc["shape"])
    pois = np.asarray(doc["pois"], dtype=float).reshape(-1, 3)
    return CityModel(
        bounds=tuple(doc["bounds"]),
        stations=np.asarray(doc["stations"], dtype=float),
        zones={name: ZonePartition(rle_decode(runs, shape), name) for name, runs in doc["zones"].items()},
        poi_points=pois[:, :2],
        poi_categories=pois[:, 2].astype(np.int64),
        downtown_center=tuple(doc["downtown_center"]),
        function_class=rle_decode(doc["function_class"], shape),
        base_density=np.asarray(doc["base_density"], dtype=float),
        config=CityConfig(**doc["config"]),
        seed=int(doc.get("seed", 0)),
    )


def save_city(city: CityModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(city_to_dict(city)))


def load_city(path: str | Path) -> CityModel:
    return city_from_dict(json.loads(Path(path).read_text()))
