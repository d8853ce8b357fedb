"""Five-fold CV of the static SRCNN against the pixel baselines, district -> fine.

    python3 scripts/run_method_comparison.py --seeds 0 1 2 --out results/methods.csv
"""

import argparse
import logging
from pathlib import Path

from popmap.baselines import METHODS
from popmap.config import desk_preset
from popmap.evaluation import FoldPlan, format_table, run_cv, write_report_csv
from popmap.experiments import BaselinePipeline, SrcnnPipeline, build_world


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["srcnn", *METHODS])
    ap.add_argument("--folds", type=int, nargs="+", help="subset of folds (default all)")
    ap.add_argument("--out", type=Path, default=Path("results/methods.csv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for seed in args.seeds:
        cfg = desk_preset(seed)
        world = build_world(cfg)
        plan = FoldPlan(world.truth.days, cfg.n_folds, seed)
        for method in args.methods:
            pipe = SrcnnPipeline(world, cfg.srcnn) if method == "srcnn" else BaselinePipeline(world, method, cfg.baselines)
            res = run_cv(pipe, world.truth, plan, args.folds)
            for rep in res.folds + [res.mean]:
                rows.append({"seed": seed, "method": method, "level_pair": "X1-X3", **rep.row()})
            logging.info("seed %d %s: mean RMSE %.3f", seed, method, res.mean.rmse)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(args.out, rows)
    print(format_table([r for r in rows if r["fold"] == "mean"], ["seed", "method"]))


if __name__ == "__main__":
    main()
