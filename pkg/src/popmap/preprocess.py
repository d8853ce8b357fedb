"""Station records to multi-level population rasters.

Coordinates are planar km. Grid cell ``(r, c)`` covers ``x in [c, c+1]`` and
``y in [r, r+1]``; a station is an ``(x, y)`` point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, QhullError

from popmap.errors import InputError, PartitionError, ShapeError

logger = logging.getLogger(__name__)

DISTRICT, STREET_BLOCK, FINE = "district", "street_block", "fine"
LEVEL_CODES = {DISTRICT: 1, STREET_BLOCK: 2, FINE: 3}


# -- domain types ----------------------------------------------------------------


@dataclass
class ZonePartition:
    """Cell-to-zone labelling of one aggregation level; ``-1`` marks outside the boundary."""

    labels: np.ndarray
    level: str = FINE

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        inside = self.labels[self.labels >= 0]
        if inside.size == 0:
            raise PartitionError("partition has no in-boundary cells")
        present = np.unique(inside)
        if present[0] != 0 or present[-1] != present.size - 1:
            raise PartitionError(f"{self.level}: zone ids must be contiguous 0..Z-1")

    @property
    def mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def n_zones(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.mask], minlength=self.n_zones)

    def parent_of(self, coarser: "ZonePartition") -> np.ndarray:
        """Map each zone of ``self`` to its containing zone in ``coarser``.

        Raises PartitionError when some zone straddles two coarser zones.
        """
        if coarser.shape != self.shape or not np.array_equal(coarser.mask, self.mask):
            raise PartitionError("partitions cover different cells")
        m = self.mask
        fine, coarse = self.labels[m], coarser.labels[m]
        parent = np.full(self.n_zones, -1)
        parent[fine] = coarse
        if np.any(parent[fine] != coarse):
            raise PartitionError(f"{self.level} is not nested in {coarser.level}")
        return parent

    def is_nested_in(self, coarser: "ZonePartition") -> bool:
        try:
            self.parent_of(coarser)
        except PartitionError:
            return False
        return True


def fine_partition(mask: np.ndarray) -> ZonePartition:
    """Every in-boundary cell is its own zone."""
    labels = np.full(mask.shape, -1, dtype=np.int64)
    labels[mask] = np.arange(int(mask.sum()))
    return ZonePartition(labels, FINE)


def coarsen(
    child: ZonePartition,
    parent: ZonePartition | None,
    n_zones: int,
    rng: np.random.Generator,
    level: str,
) -> ZonePartition:
    """Group the zones of ``child`` into ``n_zones`` zones nested in ``parent``.

    Each parent zone receives a share of the zone budget proportional to its
    area (at least one, at most its child count); child zones are clustered
    around randomly chosen seeds by a few weighted Lloyd iterations on their
    centroids. With ``parent=None`` the whole city is one parent.
    """
    mask = child.mask
    if parent is None:
        parent = ZonePartition(np.where(mask, 0, -1), "city")
    up = child.parent_of(parent)
    rows, cols = np.nonzero(mask)
    lab = child.labels[mask]
    size = np.bincount(lab, minlength=child.n_zones).astype(float)
    cy = np.bincount(lab, weights=rows + 0.5, minlength=child.n_zones) / size
    cx = np.bincount(lab, weights=cols + 0.5, minlength=child.n_zones) / size

    n_parent = parent.n_zones
    if not n_parent <= n_zones <= child.n_zones:
        raise PartitionError(
            f"{level}: zone count {n_zones} outside [{n_parent}, {child.n_zones}]"
        )
    members = [np.flatnonzero(up == p) for p in range(n_parent)]
    budget = _allocate(np.array([size[m].sum() for m in members]), np.array([len(m) for m in members]), n_zones)

    group = np.empty(child.n_zones, dtype=np.int64)
    next_id = 0
    for p, m in enumerate(members):
        k = int(budget[p])
        pts = np.column_stack([cx[m], cy[m]])
        w = size[m]
        seeds = pts[rng.choice(len(m), size=k, replace=False)]
        for _ in range(4):
            d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
            assign = np.argmin(d2, axis=1)
            for j in range(k):
                sel = assign == j
                if sel.any():
                    seeds[j] = np.average(pts[sel], axis=0, weights=w[sel])
        d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        # every seed keeps at least one member
        for j in range(k):
            if not np.any(assign == j):
                counts = np.bincount(assign, minlength=k)
                donor = np.flatnonzero(counts > 1)
                cand = np.flatnonzero(np.isin(assign, donor))
                pick = cand[np.argmin(d2[cand, j])]
                assign[pick] = j
        group[m] = assign + next_id
        next_id += k

    labels = np.full(mask.shape, -1, dtype=np.int64)
    labels[mask] = group[lab]
    return ZonePartition(_relabel(labels), level)


def _allocate(area: np.ndarray, cap: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` over weights, with 1 <= k <= cap."""
    k = np.ones(len(area), dtype=np.int64)
    left = total - k.sum()
    while left > 0:
        share = area / area.sum() * total
        room = cap - k
        score = np.where(room > 0, share - k, -np.inf)
        k[int(np.argmax(score))] += 1
        left -= 1
    return k


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber zone ids by first appearance in row-major order."""
    flat = labels.ravel()
    inside = flat[flat >= 0]
    _, first = np.unique(inside, return_index=True)
    order = np.unique(inside)[np.argsort(first)]
    remap = np.full(int(labels.max()) + 1, -1)
    remap[order] = np.arange(order.size)
    out = labels.copy()
    out[labels >= 0] = remap[labels[labels >= 0]]
    return out


@dataclass
class GridMap:
    values: np.ndarray
    level: str
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ShapeError("values and mask differ in shape")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check(self, zones: ZonePartition | None = None, atol: float = 1e-9) -> None:
        """Assert the GridMap invariants (raises ValueError on violation)."""
        if np.any(self.values < 0):
            raise ValueError("negative population")
        if np.any(self.values[~self.mask] != 0):
            raise ValueError("non-zero value outside the boundary")
        if zones is not None:
            lab = zones.labels[self.mask]
            v = self.values[self.mask]
            hi = np.full(zones.n_zones, -np.inf)
            lo = np.full(zones.n_zones, np.inf)
            np.maximum.at(hi, lab, v)
            np.minimum.at(lo, lab, v)
            if np.any(hi - lo > atol * max(1.0, float(np.abs(v).max()))):
                raise ValueError("map is not block-constant on its zones")


@dataclass
class PopCube:
    """``T x H x W`` population frames with ``(day, hour)`` timestamps."""

    frames: np.ndarray
    timestamps: list[tuple[int, int]]
    level: str
    mask: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.timestamps = [tuple(map(int, t)) for t in self.timestamps]
        if self.frames.ndim != 3 or self.frames.shape[1:] != self.mask.shape:
            raise ShapeError(f"frames {self.frames.shape} do not match mask {self.mask.shape}")
        if len(self.timestamps) != self.frames.shape[0]:
            raise ShapeError("one timestamp per frame required")
        keys = [d * 24 + h for d, h in self.timestamps]
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def days(self) -> list[int]:
        return sorted({d for d, _ in self.timestamps})

    @property
    def hours(self) -> np.ndarray:
        return np.array([h for _, h in self.timestamps])

    def frame(self, i: int) -> GridMap:
        return GridMap(self.frames[i], self.level, self.mask)

    def select(self, days: Sequence[int] | None = None, hours: Sequence[int] | None = None) -> "PopCube":
        keep = [
            i
            for i, (d, h) in enumerate(self.timestamps)
            if (days is None or d in days) and (hours is None or h in hours)
        ]
        return PopCube(self.frames[keep], [self.timestamps[i] for i in keep], self.level, self.mask)

    def with_frames(self, frames: np.ndarray, level: str | None = None) -> "PopCube":
        return PopCube(frames, list(self.timestamps), level or self.level, self.mask)


def hourly_timestamps(n_days: int) -> list[tuple[int, int]]:
    return [(d, h) for d in range(n_days) for h in range(24)]


@dataclass
class PoiGrid:
    """Per-category PoI counts, shape ``(4, H, W)`` in category order."""

    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3 or self.counts.shape[0] != 4:
            raise ShapeError("PoiGrid needs shape (4, H, W)")
        if np.any(self.counts < 0):
            raise ValueError("negative PoI count")

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape[1:]

    def total(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def grid_pois(points: np.ndarray, categories: np.ndarray, shape: tuple[int, int]) -> PoiGrid:
    """Count PoIs per cell and category; points on the far edge fall in the last cell."""
    h, w = shape
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    cats = np.asarray(categories, dtype=np.int64)
    c = np.clip(np.floor(points[:, 0]).astype(int), 0, w - 1)
    r = np.clip(np.floor(points[:, 1]).astype(int), 0, h - 1)
    counts = np.zeros((4, h, w), dtype=np.int64)
    np.add.at(counts, (cats, r, c), 1)
    return PoiGrid(counts)


# -- activation correction --------------------------------------------------------


def activation_correct(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inflate observed station counts by the city-wide activation ratio.

    ``counts`` is ``(stations, time)``. With ``S[t]`` the city total and
    ``R[t] = S[t] / max S``, returns ``(counts / R, valid)`` where ``valid``
    flags slots with ``S[t] > 0``. Invalid slots are zeroed and logged.
    """
    x = np.asarray(counts, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("counts must be (stations, time)")
    if np.any(x < 0):
        raise InputError("negative device count")
    s = x.sum(axis=0)
    peak = s.max()
    if peak <= 0:
        raise InputError("no time slot has a positive total")
    valid = s > 0
    if not valid.all():
        logger.warning("activation_correct: dropped empty time slots %s", np.flatnonzero(~valid).tolist())
    ratio = np.where(valid, s / peak, 1.0)
    y = np.where(valid[None, :], x / ratio[None, :], 0.0)
    return y, valid


def to_hourly(counts: np.ndarray, per_hour: int = 6) -> np.ndarray:
    """Average consecutive sub-hour slots (default six 10-minute slots) along the last axis."""
    x = np.asarray(counts, dtype=np.float64)
    if x.shape[-1] % per_hour:
        raise ShapeError(f"time axis {x.shape[-1]} not a multiple of {per_hour}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // per_hour, per_hour).mean(axis=-1)


# -- Voronoi rasterisation -----------------------------------------------------------


def clip_halfplane(poly: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon to ``{p : a . p <= b}``."""
    if len(poly) == 0:
        return poly
    side = poly @ a - b
    inside = side <= 0
    if inside.all():
        return poly
    if not inside.any():
        return poly[:0]
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = side[i], side[(i + 1) % n]
        if sp <= 0:
            out.append(p)
        if (sp <= 0) != (sq <= 0):
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return np.array(out)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_box(poly: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    for a, b in (((-1.0, 0.0), -x0), ((1.0, 0.0), x1), ((0.0, -1.0), -y0), ((0.0, 1.0), y1)):
        poly = clip_halfplane(poly, np.array(a), b)
        if len(poly) == 0:
            break
    return poly


def _neighbours(stations: np.ndarray) -> list[np.ndarray]:
    n = len(stations)
    everyone = [np.delete(np.arange(n), i) for i in range(n)]
    if n < 4:
        return everyone
    try:
        tri = Delaunay(stations)
    except QhullError:
        return everyone
    indptr, indices = tri.vertex_neighbor_vertices
    return [indices[indptr[i] : indptr[i + 1]] for i in range(n)]


def voronoi_polygons(stations: np.ndarray, bounds: tuple[float, float, float, float]) -> list[np.ndarray]:
    """Exact Voronoi cells clipped to ``bounds = (x0, y0, x1, y1)`` by bisector half-planes."""
    x0, y0, x1, y1 = bounds
    box = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    polys = []
    for i, nbrs in enumerate(_neighbours(stations)):
        poly = box
        s = stations[i]
        for j in nbrs:
            t = stations[j]
            # |p - s|^2 <= |p - t|^2  <=>  2 p.(t - s) <= |t|^2 - |s|^2
            poly = clip_halfplane(poly, 2.0 * (t - s), float(t @ t - s @ s))
            if len(poly) == 0:
                break
        polys.append(poly)
    return polys


def voronoi_weights(stations, mask: np.ndarray) -> sparse.csr_matrix:
    """Station-to-cell area weights, an ``(n_stations, H*W)`` sparse matrix.

    ``w[s, c] = area(cell c ∩ V_s) / area(V_s ∩ boundary)`` where the boundary
    is the union of cells with ``mask`` true. Each row sums to one.
    """
    stations = np.asarray(stations, dtype=float).reshape(-1, 2)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if len(stations) == 0:
        raise InputError("need at least one station")
    if len(np.unique(stations, axis=0)) != len(stations):
        raise InputError("duplicate station coordinates")
    rows, cols, vals = [], [], []
    for s, poly in enumerate(voronoi_polygons(stations, (0.0, 0.0, float(w), float(h)))):
        if len(poly) < 3:
            raise InputError(f"station {s} has an empty Voronoi cell inside the grid")
        r0 = max(int(np.floor(poly[:, 1].min())), 0)
        r1 = min(int(np.ceil(poly[:, 1].max())), h)
        c0 = max(int(np.floor(poly[:, 0].min())), 0)
        c1 = min(int(np.ceil(poly[:, 0].max())), w)
        cells, areas = [], []
        for r in range(r0, r1):
            band = clip_box(poly, c0, r, c1, r + 1)
            if len(band) < 3:
                continue
            for c in range(c0, c1):
                if not mask[r, c]:
                    continue
                a = polygon_area(clip_box(band, c, r, c + 1, r + 1))
                if a > 0:
                    cells.append(r * w + c)
                    areas.append(a)
        total = float(np.sum(areas))
        if total <= 0:
            raise InputError(f"station {s}: Voronoi cell does not meet the boundary")
        rows.extend([s] * len(cells))
        cols.extend(cells)
        vals.extend(np.asarray(areas) / total)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(stations), h * w))


def rasterize(station_counts: np.ndarray, weights: sparse.spmatrix, shape: tuple[int, int]) -> np.ndarray:
    """Spread station counts onto the grid: ``cell = sum_s count_s * w[s, cell]``.

    ``station_counts`` is ``(stations,)`` for one frame or ``(stations, T)``
    for a series, giving ``(H, W)`` or ``(T, H, W)``.
    """
    y = np.asarray(station_counts, dtype=np.float64)
    if y.shape[0] != weights.shape[0]:
        raise ShapeError(f"{y.shape[0]} station counts for {weights.shape[0]} stations")
    if y.ndim == 1:
        return (weights.T @ y).reshape(shape)
    return (weights.T @ y).T.reshape(y.shape[1], *shape)


# -- aggregation and patches ----------------------------------------------------------


def aggregate(fine: np.ndarray, zones: ZonePartition) -> np.ndarray:
    """Replace every in-boundary cell by the mean of its zone (block-constant map).

    Works on ``(H, W)`` or ``(T, H, W)`` arrays; zone sums are preserved.
    """
    x = np.asarray(fine, dtype=np.float64)
    if x.shape[-2:] != zones.shape:
        raise ShapeError(f"map {x.shape} vs partition {zones.shape}")
    sizes = zones.sizes()
    if np.any(sizes == 0):
        raise PartitionError(f"{zones.level}: zone without in-boundary cells")
    m = zones.mask
    lab = zones.labels[m]
    flat = x.reshape(-1, *zones.shape)[:, m]
    nz = zones.n_zones
    offsets = (np.arange(flat.shape[0]) * nz)[:, None]
    sums = np.bincount((lab[None, :] + offsets).ravel(), weights=flat.ravel(), minlength=flat.shape[0] * nz)
    means = sums.reshape(flat.shape[0], nz) / sizes
    out = np.zeros_like(x.reshape(-1, *zones.shape))
    out[:, m] = means[:, lab]
    return out.reshape(x.shape)


def zone_sums(values: np.ndarray, zones: ZonePartition) -> np.ndarray:
    """Sum of ``values`` per zone, for ``(H, W)`` or ``(T, H, W)`` input."""
    x = np.asarray(values, dtype=np.float64).reshape(-1, *zones.shape)
    m = zones.mask
    return np.stack([np.bincount(zones.labels[m], weights=f[m], minlength=zones.n_zones) for f in x]).reshape(
        np.asarray(values).shape[:-2] + (zones.n_zones,)
    )


def window_starts(size: int, patch: int, stride: int) -> list[int]:
    """Sliding-window origins, plus a final window flush with the far edge."""
    if patch > size:
        raise ShapeError(f"patch {patch} larger than map dimension {size}")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def extract_patches(
    inputs: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    patch: int,
    stride: int | None = None,
    max_outside: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Cut aligned ``(input, target)`` training windows.

    ``inputs`` is ``(C, H, W)`` and ``target`` ``(H, W)``. A window whose
    out-of-boundary fraction exceeds ``max_outside`` is dropped. Returns
    arrays of shape ``(P, C, patch, patch)`` and ``(P, 1, patch, patch)``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    _, h, w = inputs.shape
    if target.shape != (h, w) or mask.shape != (h, w):
        raise ShapeError("inputs, target and mask must share spatial shape")
    stride = stride or max(patch // 2, 1)
    xs, ys = [], []
    for r in window_starts(h, patch, stride):
        for c in window_starts(w, patch, stride):
            outside = 1.0 - mask[r : r + patch, c : c + patch].mean()
            if outside > max_outside:
                continue
            xs.append(inputs[:, r : r + patch, c : c + patch])
            ys.append(target[None, r : r + patch, c : c + patch])
    if not xs:
        return np.zeros((0, inputs.shape[0], patch, patch)), np.zeros((0, 1, patch, patch))
    return np.stack(xs), np.stack(ys)


# -- GridMap CSV ------------------------------------------------------------------


def write_gridmap_csv(path: str | Path, grid: GridMap, day: int = 0, hour: int = 0) -> None:
    """Header ``# level,H,W,day,hour`` then H rows; the mask goes to ``<stem>.mask.csv``."""
    path = Path(path)
    values = np.where(grid.mask, grid.values, 0.0)
    if not np.all(np.isfinite(values)):
        raise InputError("NaN/inf values cannot be written")
    level = LEVEL_CODES.get(grid.level, grid.level)
    lines = [f"# {level},{grid.height},{grid.width},{day},{hour}"]
    lines += [",".join(repr(float(v)) for v in row) for row in values]
    path.write_text("\n".join(lines) + "\n")
    mask_lines = [",".join("1" if v else "0" for v in row) for row in grid.mask]
    path.with_suffix(".mask.csv").write_text("\n".join(mask_lines) + "\n")


def read_gridmap_csv(path: str | Path) -> tuple[GridMap, int, int]:
    path = Path(path)
    lines = path.read_text().splitlines()
    level, h, w, day, hour = lines[0].lstrip("# ").split(",")
    values = np.array([[float(v) for v in line.split(",")] for line in lines[1 : 1 + int(h)]])
    if values.shape != (int(h), int(w)):
        raise InputError(f"{path}: expected {h}x{w} values")
    if np.isnan(values).any():
        raise InputError(f"{path}: NaN values")
    mask_path = path.with_suffix(".mask.csv")
    if mask_path.exists():
        mask = np.array([[v == "1" for v in line.split(",")] for line in mask_path.read_text().splitlines()])
    else:
        mask = np.ones_like(values, dtype=bool)
    names = {str(v): k for k, v in LEVEL_CODES.items()}
    return GridMap(values, names.get(level, level), mask), int(day), int(hour)
