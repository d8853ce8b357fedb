"""``popmap`` command line: gen, pipeline, export, report.

A run directory holds one configuration's artifacts plus ``manifest.json``
(config hash, per-stage status, wall time and sha256 of every file written).
Stages whose artifacts match the current config hash are skipped unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from popmap import __version__
from popmap.baselines import write_results_csv
from popmap.citygen import load_city, save_city
from popmap.config import ExperimentConfig, resolve_config
from popmap.errors import ConfigError, PopmapError, StateError
from popmap.evaluation import (
    FoldPlan,
    compute_metrics,
    format_table,
    locality_breakdown,
    poi_subsets,
    run_poi_ablation,
    run_segmented,
    subset_signature,
    write_report_csv,
)
from popmap.experiments import (
    BaselinePipeline,
    SrcnnPipeline,
    World,
    build_world,
    diurnal_range_ratio,
    preprocess_records,
    residential_cells,
    static_fine,
)
from popmap.io import export_csv, export_pgm16, read_cube, read_cube_frames, write_cube
from popmap.preprocess import DISTRICT, FINE, STREET_BLOCK, PopCube, aggregate
from popmap.spatial import StackedMapper, build_ladder
from popmap.temporal import load_temporal, save_temporal, smooth_cube, train_temporal

logger = logging.getLogger("popmap")

STAGES = ("gen", "preprocess", "train-spatial", "train-temporal", "baselines", "eval")
REQUIRES = {
    "gen": (),
    "preprocess": ("gen",),
    "train-spatial": ("gen",),
    "train-temporal": ("gen", "train-spatial"),
    "baselines": ("gen",),
    "eval": ("gen", "train-spatial", "train-temporal", "baselines"),
}


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- run directory ---------------------------------------------------------------------


class Run:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.dir = out
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.manifest_path = out / "manifest.json"
        self.manifest = self._load_manifest()
        self._world: World | None = None

    def _load_manifest(self) -> dict:
        fresh = {
            "config_hash": self.hash,
            "config": self.cfg.to_dict(),
            "popmap_version": __version__,
            "numpy_version": np.__version__,
            "stages": {},
        }
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("config_hash") == self.hash:
                return old
            logger.info("config changed (hash %s -> %s); earlier stages are stale", old.get("config_hash", "?")[:12], self.hash[:12])
        return fresh

    def save_manifest(self) -> None:
        write_atomic(self.manifest_path, json.dumps(self.manifest, indent=2, sort_keys=True))

    def complete(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("status") != "complete":
            return False
        for rel, digest in entry["artifacts"].items():
            p = self.dir / rel
            if not p.exists() or sha256(p) != digest:
                return False
        return True

    def record(self, stage: str, files: list[Path], wall: float) -> None:
        self.manifest["stages"][stage] = {
            "status": "complete",
            "wall_s": round(wall, 3),
            "artifacts": {str(p.relative_to(self.dir)): sha256(p) for p in sorted(files)},
        }
        self.save_manifest()

    @property
    def world(self) -> World:
        if self._world is None:
            city = load_city(self.dir / "city.json")
            truth = read_cube(self.dir / "truth.pcb", city.mask)
            self._world = World(city, truth, build_ladder(city.zones, self.cfg.seed))
        return self._world

    def split(self) -> tuple[PopCube, PopCube]:
        truth = self.world.truth
        plan = FoldPlan(truth.days, self.cfg.n_folds, self.cfg.seed)
        return truth.select(days=plan.train_days(self.cfg.test_fold)), truth.select(days=plan.test_days(self.cfg.test_fold))

    def training_truth(self) -> PopCube:
        """Training days from the generator, or from the preprocessed raster when configured."""
        train, _ = self.split()
        if self.cfg.truth_source == "preprocessed":
            raster = read_cube(self.dir / "preprocess" / "raster.pcb", self.world.mask)
            return raster.select(days=train.days)
        return train


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{out} is locked by another popmap process (delete {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- stages ------------------------------------------------------------------------------


def stage_gen(run: Run) -> list[Path]:
    world = build_world(run.cfg)
    run._world = World(world.city, world.truth, world.ladder)
    save_city(world.city, run.dir / "city.json")
    write_cube(run.dir / "truth.pcb", world.truth.frames)
    cfg_path = run.dir / "config.json"
    cfg_path.write_text(json.dumps(run.cfg.to_dict(), indent=2, sort_keys=True))
    return [run.dir / "city.json", run.dir / "truth.pcb", cfg_path]


def stage_preprocess(run: Run) -> list[Path]:
    d = run.dir / "preprocess"
    d.mkdir(exist_ok=True)
    raster, summary = preprocess_records(run.world, run.cfg.dropout_profile, run.cfg.seed)
    write_cube(d / "raster.pcb", raster.frames)
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return [d / "raster.pcb", d / "summary.json"]


def stage_train_spatial(run: Run) -> list[Path]:
    if run.cfg.truth_source == "preprocessed" and not run.complete("preprocess"):
        raise StateError("preprocess artifacts missing (truth_source is 'preprocessed')")
    pipe = SrcnnPipeline(run.world, run.cfg.srcnn, run.cfg.selected_pois)
    mapper = pipe.fit(run.training_truth())
    d = run.dir / "spatial"
    mapper.save(d, extra={"train_days": run.split()[0].days, "truth_source": run.cfg.truth_source})
    return sorted(d.iterdir())


def stage_train_temporal(run: Run) -> list[Path]:
    mapper = StackedMapper.load(run.dir / "spatial")
    train = run.training_truth()
    static = static_fine(run.world, mapper, train)
    files = []
    for name, use_time in (("flat", False), ("time", True)):
        hp = type(run.cfg.temporal)(**{**run.cfg.temporal.__dict__, "use_time": use_time})
        model, trace = train_temporal(static, train, hp)
        d = run.dir / "temporal" / name
        save_temporal(model, d, extra={"final_loss": float(np.mean(trace[-50:]))})
        files += sorted(d.iterdir())
    return files


def stage_baselines(run: Run) -> list[Path]:
    d = run.dir / "baselines"
    d.mkdir(exist_ok=True)
    train, test = run.split()
    rows, files = [], []
    for method in run.cfg.baseline_methods:
        hp = dataclasses.replace(run.cfg.baselines, n_jobs=int(os.environ.get("POPMAP_THREADS", "1")))
        pipe = BaselinePipeline(run.world, method, hp)
        pred = pipe(train, test)
        write_cube(d / f"{method}.pcb", pred.frames)
        files.append(d / f"{method}.pcb")
        r = compute_metrics(pred, test)
        rows.append(
            {"method": method, "level_pair": "X1-X3", "fold": run.cfg.test_fold, "RMSE": r.rmse, "NRMSE": r.nrmse,
             "Corr": r.corr, "MAE": r.mae, "wall_time_s": pipe.wall_time}
        )
    write_results_csv(d / "results.csv", rows)
    return files + [d / "results.csv"]


def stage_eval(run: Run) -> list[Path]:
    cfg, world = run.cfg, run.world
    train, test = run.split()
    mapper = StackedMapper.load(run.dir / "spatial")
    pois, mask = world.pois, world.mask
    rows = []

    def add(method, pair, pred, truth):
        r = compute_metrics(pred, truth, mask)
        rows.append({"method": method, "level_pair": pair, "fold": cfg.test_fold, "RMSE": r.rmse, "NRMSE": r.nrmse, "Corr": r.corr, "MAE": r.mae})

    x1 = aggregate(test.frames, world.zones(DISTRICT))
    x2_truth = aggregate(test.frames, world.zones(STREET_BLOCK))
    add("static", "X1-X2", mapper.map_level(x1, pois, mask, DISTRICT, STREET_BLOCK), x2_truth)
    static13 = test.with_frames(mapper.map_level(x1, pois, mask, DISTRICT, FINE))
    add("static", "X1-X3", static13, test)
    for method in cfg.baseline_methods:
        add(method, "X1-X3", read_cube(run.dir / "baselines" / f"{method}.pcb", mask).frames, test)
    write_report_csv(run.dir / "metrics.csv", rows)

    st = static_fine(world, mapper, test)
    res = residential_cells(world)
    trows = []
    for name, cube in (("static", st), ("flat", smooth_cube(st, load_temporal(run.dir / "temporal" / "flat"))),
                       ("time", smooth_cube(st, load_temporal(run.dir / "temporal" / "time")))):
        r = compute_metrics(cube, test)
        trows.append({"method": name, "level_pair": "X2-X3", "fold": cfg.test_fold, "RMSE": r.rmse, "NRMSE": r.nrmse,
                      "Corr": r.corr, "MAE": r.mae, "residential_range_ratio": diurnal_range_ratio(cube, test, res)})
    write_report_csv(run.dir / "temporal.csv", trows)

    loc = locality_breakdown(static13, test, world.city)
    lrows = [{"curve": curve, "bin": b.label, "count": b.count, "RMSE": b.rmse} for curve, v in loc.items() for b in v["bins"]]
    write_report_csv(run.dir / "locality.csv", lrows)
    files = [run.dir / "metrics.csv", run.dir / "temporal.csv", run.dir / "locality.csv"]

    text = ["Static mapping vs baselines", format_table(rows, ("method", "level_pair")), "",
            "Temporal smoothing (street block -> fine)", format_table(trows, ("method",)), ""]
    if cfg.run_segmented:
        seg_rows = []
        pipe = SrcnnPipeline(world, cfg.srcnn, cfg.selected_pois)
        for r in run_segmented(pipe, train, test, [tuple(p) for p in cfg.periods], overall=static13):
            for kind in ("segmented", "overall"):
                m = r[kind]
                seg_rows.append({"period": r["period"], "hours": f"{r['hours'][0]}-{r['hours'][-1] + 1}", "model": kind,
                                 "RMSE": m.rmse, "NRMSE": m.nrmse, "Corr": m.corr, "MAE": m.mae})
        write_report_csv(run.dir / "segmented.csv", seg_rows)
        files.append(run.dir / "segmented.csv")
        text += ["Segmented models", format_table(seg_rows, ("period", "hours", "model")), ""]
    if cfg.run_poi_ablation:
        abl = run_poi_ablation(lambda s: SrcnnPipeline(world, cfg.srcnn, s), train, test, poi_subsets())
        prow = [{"pois": k, "RMSE": m.rmse, "NRMSE": m.nrmse, "Corr": m.corr, "MAE": m.mae} for k, m in abl.items()]
        write_report_csv(run.dir / "poi_ablation.csv", prow)
        files.append(run.dir / "poi_ablation.csv")
        text += ["PoI ablation", format_table(prow, ("pois",)), ""]
    (run.dir / "report.txt").write_text("\n".join(text))
    return files + [run.dir / "report.txt"]


STAGE_FUNCS = {
    "gen": stage_gen,
    "preprocess": stage_preprocess,
    "train-spatial": stage_train_spatial,
    "train-temporal": stage_train_temporal,
    "baselines": stage_baselines,
    "eval": stage_eval,
}


def run_stages(run: Run, stages: list[str], force: bool) -> None:
    for stage in STAGES:
        if stage not in stages:
            continue
        if run.complete(stage) and not force:
            logger.info("%s: up to date (config %s), skipped", stage, run.hash[:12])
            print(f"{stage}: skipped (up to date)")
            continue
        for need in REQUIRES[stage]:
            if not run.complete(need):
                raise StateError(f"{need} artifacts missing; run `popmap pipeline --stages {need}` first")
        start = time.perf_counter()
        files = STAGE_FUNCS[stage](run)
        wall = time.perf_counter() - start
        run.record(stage, files, wall)
        print(f"{stage}: done in {wall:.1f}s")


# -- entry point -----------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popmap", description="Fine-grained population mapping experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file overriding the preset")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=("desk", "paper-scale"))
        sp.add_argument("--force", action="store_true", help="rerun stages even if up to date")

    common(sub.add_parser("gen", help="generate the city and ground-truth cube"))
    pl = sub.add_parser("pipeline", help="run pipeline stages")
    common(pl)
    pl.add_argument("--stages", default=",".join(STAGES), help=f"comma list from {','.join(STAGES)}")
    ex = sub.add_parser("export", help="export a cube as per-frame CSV or 16-bit PGM")
    ex.add_argument("cube")
    ex.add_argument("--format", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--city", help="city.json providing the boundary (default: next to the cube)")
    rp = sub.add_parser("report", help="print the evaluation report of a run")
    rp.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("POPMAP_THREADS", "1"))
    try:
        with threadpool_limits(threads):
            return _dispatch(args, threads)
    except (PopmapError, OSError) as exc:
        print(f"popmap: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


def _dispatch(args, threads: int) -> int:
    if args.command in ("gen", "pipeline"):
        cfg = resolve_config(args.config, args.preset, args.seed)
        out = Path(args.out)
        cfg.out_dir = str(out)
        if args.command == "gen":
            stages = ["gen"]
        else:
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            bad = set(stages) - set(STAGES)
            if bad:
                raise ConfigError(f"unknown stages {sorted(bad)}; choose from {STAGES}")
        with run_lock(out):
            run = Run(out, cfg)
            run.save_manifest()
            run_stages(run, stages, args.force)
        return 0
    if args.command == "export":
        cube_path = Path(args.cube)
        if args.format == "pgm16":
            paths = export_pgm16(read_cube_frames(cube_path), args.out)
        elif args.format == "csv":
            city_path = Path(args.city) if args.city else cube_path.parent / "city.json"
            frames = read_cube_frames(cube_path)
            mask = load_city(city_path).mask if city_path.exists() else np.ones(frames.shape[1:], bool)
            paths = export_csv(read_cube(cube_path, mask), args.out)
        else:
            raise ConfigError(f"unknown export format {args.format!r}; expected csv or pgm16")
        print(f"wrote {len(paths)} frames to {args.out}")
        return 0
    if args.command == "report":
        report = Path(args.out) / "report.txt"
        if not report.exists():
            raise StateError("eval artifacts missing; run `popmap pipeline --stages eval` first")
        print(report.read_text())
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
