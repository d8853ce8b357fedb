"""District -> fine RMSE for every subset of the four PoI channels.

    python3 scripts/run_poi_ablation.py --seeds 0 --subsets all
    python3 scripts/run_poi_ablation.py --seeds 0 1 2 --subsets endpoints
"""

import argparse
import logging
from pathlib import Path

from popmap.config import desk_preset
from popmap.evaluation import FoldPlan, format_table, poi_subsets, run_poi_ablation, write_report_csv
from popmap.experiments import SrcnnPipeline, build_world
from popmap.spatial import ALL_POIS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--subsets", choices=("all", "endpoints"), default="all")
    ap.add_argument("--out", type=Path, default=Path("results/poi_ablation.csv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    subsets = poi_subsets() if args.subsets == "all" else [(), ALL_POIS]
    rows = []
    for seed in args.seeds:
        cfg = desk_preset(seed)
        world = build_world(cfg)
        plan = FoldPlan(world.truth.days, cfg.n_folds, seed)
        train = world.truth.select(days=plan.train_days(args.fold))
        test = world.truth.select(days=plan.test_days(args.fold))
        reports = run_poi_ablation(lambda s: SrcnnPipeline(world, cfg.srcnn, s), train, test, subsets)
        rows += [{"seed": seed, **r.row()} for r in reports.values()]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(args.out, rows)
    print(format_table(rows, ["seed", "pois"]))


if __name__ == "__main__":
    main()
