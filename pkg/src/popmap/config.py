"""Experiment configuration and the two scale presets."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from popmap.baselines import METHODS, BaselineHyper
from popmap.citygen import CityConfig
from popmap.errors import ConfigError
from popmap.evaluation import DEFAULT_PERIODS, check_periods
from popmap.spatial import ALL_POIS, SrcnnHyper
from popmap.temporal import TemporalHyper

PRESETS = ("desk", "paper-scale")

# devices active relative to population: low overnight, high in the evening
DEFAULT_DROPOUT = [0.45] * 6 + [0.6, 0.7, 0.75] + [0.8] * 8 + [0.85, 0.9, 0.9, 0.85] + [0.75, 0.65, 0.55]


@dataclass
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    city: CityConfig = field(default_factory=CityConfig)
    srcnn: SrcnnHyper = field(default_factory=SrcnnHyper)
    temporal: TemporalHyper = field(default_factory=TemporalHyper)
    baselines: BaselineHyper = field(default_factory=BaselineHyper)
    baseline_methods: list[str] = field(default_factory=lambda: list(METHODS))
    selected_pois: list[int] = field(default_factory=lambda: list(ALL_POIS))
    periods: list[list[int]] = field(default_factory=lambda: [list(p) for p in DEFAULT_PERIODS])
    n_folds: int = 5
    test_fold: int = 0
    dropout_profile: list[float] = field(default_factory=lambda: list(DEFAULT_DROPOUT))
    truth_source: str = "generator"
    run_segmented: bool = False
    run_poi_ablation: bool = False
    out_dir: str | None = None

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        self.city.validate()
        cells = self.city.grid_h * self.city.grid_w
        if not self.city.n_blocks < cells:
            raise ConfigError("street blocks must be fewer than grid cells")
        if not 2 <= self.n_folds <= self.city.n_days:
            raise ConfigError(f"n_folds must be in 2..n_days ({self.city.n_days})")
        if not 0 <= self.test_fold < self.n_folds:
            raise ConfigError("test_fold out of range")
        if not set(self.selected_pois) <= set(ALL_POIS):
            raise ConfigError(f"selected_pois must be drawn from {ALL_POIS}")
        if set(self.baseline_methods) - set(METHODS):
            raise ConfigError(f"baseline methods must be drawn from {METHODS}")
        try:
            check_periods([tuple(p) for p in self.periods])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.dropout_profile) != 24 or not all(0 < p <= 1 for p in self.dropout_profile):
            raise ConfigError("dropout_profile must be 24 values in (0, 1]")
        if self.truth_source not in ("generator", "preprocessed"):
            raise ConfigError("truth_source must be 'generator' or 'preprocessed'")
        for name, value in (("srcnn.iterations", self.srcnn.iterations), ("temporal.iterations", self.temporal.iterations)):
            if value < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        nested = {"city": CityConfig, "srcnn": SrcnnHyper, "temporal": TemporalHyper, "baselines": BaselineHyper}
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            if key in nested:
                sub_known = {f.name for f in fields(nested[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                value = dict(value)
                for tup in ("filters", "kernels"):
                    if key == "srcnn" and tup in value:
                        value[tup] = tuple(value[tup])
                kwargs[key] = nested[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def desk_preset(seed: int = 0) -> ExperimentConfig:
    """32 x 32 city with a training budget that fits a laptop core."""
    return ExperimentConfig(
        seed=seed,
        preset="desk",
        city=CityConfig(),
        srcnn=SrcnnHyper(
            iterations=500, batch_size=8, lr_features=3e-3, lr_output=3e-4, patch_stage1=16, patch_stage2=16, seed=seed
        ),
        temporal=TemporalHyper(seed=seed),
        baselines=BaselineHyper(seed=seed),
    )


def paper_scale_preset(seed: int = 0) -> ExperimentConfig:
    """83 x 114 grid, 10^5 iterations, batch 512 and the published learning rates. Hours-scale."""
    return ExperimentConfig(
        seed=seed,
        preset="paper-scale",
        city=CityConfig(grid_h=83, grid_w=114, n_stations=600, n_districts=15, n_blocks=200, n_days=20),
        srcnn=SrcnnHyper(
            iterations=100_000, batch_size=512, lr_features=1e-4, lr_output=1e-5, patch_stage1=58, patch_stage2=38, seed=seed
        ),
        temporal=TemporalHyper(iterations=20_000, batch_size=512, lr=1e-3, seed=seed),
        baselines=BaselineHyper(seed=seed),
    )


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | Path | None = None, preset: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Preset defaults, then the JSON file's overrides, then an explicit seed.

    A seed given on the command line also reseeds every model hyperparameter
    block so one flag changes the whole run.
    """
    over = json.loads(Path(path).read_text()) if path else {}
    name = preset or over.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    base = (desk_preset if name == "desk" else paper_scale_preset)(over.get("seed", 0)).to_dict()
    doc = _merge(base, over)
    doc["preset"] = name
    if seed is not None:
        doc["seed"] = seed
        for block in ("srcnn", "temporal", "baselines"):
            doc[block]["seed"] = seed
    cfg = ExperimentConfig.from_dict(doc)
    cfg.validate()
    return cfg
