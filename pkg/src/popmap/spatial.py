"""Stacked SRCNN spatial mapping.

A unit is three (batch-norm -> conv -> activation) blocks: 64 filters 9x9,
32 filters 1x1, then a single 5x5 reconstruction filter with no activation.
Two units per stage map district -> intermediate -> street block and street
block -> intermediate -> fine. Every unit trains on its own pair of
aggregated ground-truth maps and units are only chained at inference.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from popmap import nn
from popmap.citygen import POICategory
from popmap.errors import PartitionError, ShapeError, StateError, TrainingError
from popmap.preprocess import (
    DISTRICT,
    FINE,
    STREET_BLOCK,
    PoiGrid,
    ZonePartition,
    aggregate,
    coarsen,
    extract_patches,
)
from popmap.tensor import Tensor, no_grad, relu

logger = logging.getLogger(__name__)

ALL_POIS: tuple[int, ...] = tuple(int(c) for c in POICategory)
INTER_A, INTER_B = "district_street_block", "street_block_fine"
LADDER_LEVELS = (DISTRICT, INTER_A, STREET_BLOCK, INTER_B, FINE)


@dataclass
class SrcnnHyper:
    iterations: int = 2000
    batch_size: int = 64
    lr_features: float = 1e-4
    lr_output: float = 1e-5
    patch_stage1: int = 22
    patch_stage2: int = 16
    stride_stage1: int | None = None
    stride_stage2: int | None = None
    filters: tuple[int, int] = (64, 32)
    kernels: tuple[int, int, int] = (9, 1, 5)
    max_outside: float = 0.5
    seed: int = 0


# -- input assembly ------------------------------------------------------------------


def build_input(pop: np.ndarray, pois: PoiGrid, selected: Sequence[int]) -> np.ndarray:
    """Stack population with the selected PoI rasters.

    ``pop`` is ``(H, W)`` or ``(T, H, W)``; the result is ``(C, H, W)`` or
    ``(T, C, H, W)`` with channel 0 the population and the PoI channels in
    category order.
    """
    pop = np.asarray(pop, dtype=np.float64)
    if pop.shape[-2:] != pois.shape:
        raise ShapeError(f"population {pop.shape[-2:]} vs PoI grid {pois.shape}")
    chans = sorted(set(int(c) for c in selected))
    extra = pois.counts[chans].astype(np.float64)
    if pop.ndim == 2:
        return np.concatenate([pop[None], extra], axis=0)
    extra = np.broadcast_to(extra, (pop.shape[0],) + extra.shape)
    return np.concatenate([pop[:, None], extra], axis=1)


@dataclass
class ChannelStats:
    """Per-channel standardisation fitted on in-boundary training pixels."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, mask: np.ndarray) -> "ChannelStats":
        x = x.reshape(-1, *x.shape[-3:])
        vals = x[:, :, mask]  # (T, C, n)
        mean = vals.mean(axis=(0, 2))
        std = vals.std(axis=(0, 2))
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        shape = (-1, 1, 1)
        return (x - self.mean.reshape(shape)) / self.std.reshape(shape)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        shape = (-1, 1, 1)
        return z * self.std.reshape(shape) + self.mean.reshape(shape)

    def scale_target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean[0]) / self.std[0]

    def unscale_target(self, z: np.ndarray) -> np.ndarray:
        return z * self.std[0] + self.mean[0]


# -- zone ladder ---------------------------------------------------------------------


def build_ladder(zones: dict[str, ZonePartition], seed: int = 0) -> list[ZonePartition]:
    """District, intermediate, street block, intermediate, fine.

    Each intermediate level has the geometric mean zone count of its stage's
    end points and nests between them.
    """
    rng = np.random.default_rng(seed)
    district, block, fine = zones[DISTRICT], zones[STREET_BLOCK], zones[FINE]
    n_a = int(round(math.sqrt(district.n_zones * block.n_zones)))
    n_b = int(round(math.sqrt(block.n_zones * fine.n_zones)))
    inter_a = coarsen(block, district, n_a, rng, INTER_A)
    inter_b = coarsen(fine, block, n_b, rng, INTER_B)
    ladder = [district, inter_a, block, inter_b, fine]
    check_ladder(ladder)
    return ladder


def check_ladder(ladder: Sequence[ZonePartition]) -> None:
    for coarse, finer in zip(ladder, ladder[1:]):
        if not finer.is_nested_in(coarse):
            raise PartitionError(f"{finer.level} is not nested in {coarse.level}")


def make_intermediate_targets(fine_truth: np.ndarray, ladder: Sequence[ZonePartition]) -> list[dict]:
    """Training streams for consecutive ladder levels, all aggregated from ground truth.

    Returns one dict per unit with ``input``/``target`` arrays, their level
    names and a ``source`` tag recording that both come from ground truth.
    """
    check_ladder(ladder)
    maps = [aggregate(fine_truth, z) for z in ladder]
    return [
        {
            "input": maps[k],
            "target": maps[k + 1],
            "input_level": ladder[k].level,
            "target_level": ladder[k + 1].level,
            "source": "aggregated-ground-truth",
        }
        for k in range(len(ladder) - 1)
    ]


# -- the unit ------------------------------------------------------------------------


class SrcnnUnit(nn.Module):
    def __init__(
        self,
        in_channels: int,
        rng: np.random.Generator,
        filters: Sequence[int] = (64, 32),
        kernels: Sequence[int] = (9, 1, 5),
    ):
        f1, f2 = filters
        k1, k2, k3 = kernels
        self.in_channels = in_channels
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2dLayer(in_channels, f1, k1, rng)
        self.bn2 = nn.BatchNorm2d(f1)
        self.conv2 = nn.Conv2dLayer(f1, f2, k2, rng)
        self.bn3 = nn.BatchNorm2d(f2)
        self.conv3 = nn.Conv2dLayer(f2, 1, k3, rng)
        self.stats: ChannelStats | None = None
        self.trained = False

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv1(self.bn1(x)))
        h = relu(self.conv2(self.bn2(h)))
        return self.conv3(self.bn3(h))

    def param_groups(self, lr_features: float, lr_output: float) -> list[tuple[list[Tensor], float]]:
        first = [p for m in (self.bn1, self.conv1, self.bn2, self.conv2) for p in m.parameters()]
        last = self.bn3.parameters() + self.conv3.parameters()
        return [(first, lr_features), (last, lr_output)]

    def predict(self, raw_input: np.ndarray, chunk: int = 8) -> np.ndarray:
        """Population map(s) from raw (unstandardised) ``(T, C, H, W)`` input."""
        if not self.trained or self.stats is None:
            raise StateError("SRCNN unit is not trained")
        x = raw_input if raw_input.ndim == 4 else raw_input[None]
        self.eval()
        outs = []
        with no_grad():
            for s in range(0, len(x), chunk):
                z = self(Tensor(self.stats.standardize(x[s : s + chunk])))
                outs.append(self.stats.unscale_target(z.data[:, 0]))
        out = np.concatenate(outs)
        return out if raw_input.ndim == 4 else out[0]


def unit_patches(
    inputs: np.ndarray,
    targets: np.ndarray,
    pois: PoiGrid,
    selected: Sequence[int],
    mask: np.ndarray,
    stats: ChannelStats,
    patch: int,
    stride: int | None,
    max_outside: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Standardised patch pairs from every frame of ``inputs``/``targets`` (``T x H x W``)."""
    xs, ys = [], []
    for frame_in, frame_out in zip(inputs, targets):
        x = stats.standardize(build_input(frame_in, pois, selected))
        y = stats.scale_target(frame_out)
        px, py = extract_patches(x, y, mask, patch, stride, max_outside)
        xs.append(px)
        ys.append(py)
    return np.concatenate(xs), np.concatenate(ys)


def train_unit(
    unit: SrcnnUnit,
    x: np.ndarray,
    y: np.ndarray,
    hp: SrcnnHyper,
    rng: np.random.Generator,
) -> list[float]:
    """Fit ``unit`` to standardised patch pairs by Adam on the MSE; returns the loss trace."""
    if len(x) == 0:
        raise ValueError("no training pairs")
    opt = nn.Adam(unit.param_groups(hp.lr_features, hp.lr_output))
    unit.train()
    batches = nn.iter_batches(len(x), hp.batch_size, rng)
    trace: list[float] = []
    for it in range(hp.iterations):
        idx = next(batches)
        opt.zero_grad()
        loss = nn.mse_loss(unit(Tensor(x[idx])), Tensor(y[idx]))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss at iteration {it} (lr={hp.lr_features}/{hp.lr_output}, "
                f"batch mean={x[idx].mean():.4g}, std={x[idx].std():.4g})"
            )
        loss.backward()
        opt.step()
        trace.append(value)
    unit.trained = True
    return trace


# -- stacked mapper ------------------------------------------------------------------


@dataclass
class StackedMapper:
    """Four independently trained units over the five-level zone ladder."""

    selected: tuple[int, ...] = ALL_POIS
    hp: SrcnnHyper = field(default_factory=SrcnnHyper)
    units: list[SrcnnUnit] = field(default_factory=list)
    levels: tuple[str, ...] = LADDER_LEVELS
    traces: list[list[float]] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    @property
    def trained(self) -> bool:
        return len(self.units) == len(self.levels) - 1 and all(u.trained for u in self.units)

    def fit(
        self,
        fine_truth: np.ndarray,
        pois: PoiGrid,
        ladder: Sequence[ZonePartition],
        mask: np.ndarray,
        units: Sequence[int] | None = None,
    ) -> "StackedMapper":
        """Train every unit (or the listed unit indices) on its own aggregated pair."""
        streams = make_intermediate_targets(fine_truth, ladder)
        self.levels = tuple(z.level for z in ladder)
        todo = range(len(streams)) if units is None else units
        if not self.units:
            self.units = [None] * len(streams)  # type: ignore[list-item]
            self.traces = [[] for _ in streams]
            self.provenance = [""] * len(streams)
        for k in todo:
            s = streams[k]
            rng = np.random.default_rng([self.hp.seed, k])
            unit = SrcnnUnit(1 + len(self.selected), rng, self.hp.filters, self.hp.kernels)
            unit.stats = ChannelStats.fit(build_input(s["input"], pois, self.selected), mask)
            stage1 = k < 2
            x, y = unit_patches(
                s["input"],
                s["target"],
                pois,
                self.selected,
                mask,
                unit.stats,
                self.hp.patch_stage1 if stage1 else self.hp.patch_stage2,
                self.hp.stride_stage1 if stage1 else self.hp.stride_stage2,
                self.hp.max_outside,
            )
            trace = train_unit(unit, x, y, self.hp, rng)
            logger.info("unit %d (%s -> %s): %d pairs, final loss %.4g", k, s["input_level"], s["target_level"], len(x), trace[-1])
            self.units[k] = unit
            self.traces[k] = trace
            self.provenance[k] = s["source"]
        return self

    def map_level(
        self,
        coarse: np.ndarray,
        pois: PoiGrid,
        mask: np.ndarray,
        start: str = DISTRICT,
        stop: str = FINE,
    ) -> np.ndarray:
        """Run the units from level ``start`` up to level ``stop`` on full-size maps.

        Outputs are clamped at zero and zeroed outside the boundary after
        every unit.
        """
        if not self.trained:
            raise StateError("stacked mapper is not trained")
        i, j = self.levels.index(start), self.levels.index(stop)
        if j <= i:
            raise ValueError(f"cannot map from {start} to {stop}")
        current = np.asarray(coarse, dtype=np.float64)
        for k in range(i, j):
            out = self.units[k].predict(build_input(current, pois, self.selected))
            current = np.where(mask, np.maximum(out, 0.0), 0.0)
        return current

    # -- persistence -------------------------------------------------------------

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        if not self.trained:
            raise StateError("refusing to save an untrained mapper")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        units = []
        for k, unit in enumerate(self.units):
            name = f"unit_{k}.ndt"
            nn.save_checkpoint(d / name, unit.state_dict())
            units.append(
                {
                    "checkpoint": name,
                    "input_level": self.levels[k],
                    "target_level": self.levels[k + 1],
                    "channel_mean": unit.stats.mean.tolist(),
                    "channel_std": unit.stats.std.tolist(),
                    "training_source": self.provenance[k],
                    "final_loss": self.traces[k][-1] if self.traces[k] else None,
                }
            )
        hp = asdict(self.hp)
        manifest = {
            "model": "stacked-srcnn",
            "selected_pois": list(self.selected),
            "levels": list(self.levels),
            "seed": self.hp.seed,
            "hyperparameters": hp,
            "units": units,
        }
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "StackedMapper":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        hp_doc = manifest["hyperparameters"]
        hp_doc["filters"] = tuple(hp_doc["filters"])
        hp_doc["kernels"] = tuple(hp_doc["kernels"])
        hp = SrcnnHyper(**hp_doc)
        mapper = cls(tuple(manifest["selected_pois"]), hp, levels=tuple(manifest["levels"]))
        rng = np.random.default_rng(0)
        for entry in manifest["units"]:
            unit = SrcnnUnit(1 + len(mapper.selected), rng, hp.filters, hp.kernels)
            unit.load_state_dict(nn.load_checkpoint(d / entry["checkpoint"]))
            unit.stats = ChannelStats(np.array(entry["channel_mean"]), np.array(entry["channel_std"]))
            unit.trained = True
            mapper.units.append(unit)
            mapper.traces.append([])
            mapper.provenance.append(entry["training_source"])
        return mapper
