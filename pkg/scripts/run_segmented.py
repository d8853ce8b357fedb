"""Per-period SRCNN models against the all-hours model restricted to each period.

    python3 scripts/run_segmented.py --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

from popmap.config import desk_preset
from popmap.evaluation import DEFAULT_PERIODS, FoldPlan, run_segmented, write_report_csv
from popmap.experiments import SrcnnPipeline, build_world


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/segmented.csv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for seed in args.seeds:
        cfg = desk_preset(seed)
        world = build_world(cfg)
        plan = FoldPlan(world.truth.days, cfg.n_folds, seed)
        train = world.truth.select(days=plan.train_days(args.fold))
        test = world.truth.select(days=plan.test_days(args.fold))
        for r in run_segmented(SrcnnPipeline(world, cfg.srcnn), train, test, DEFAULT_PERIODS):
            hours = f"{r['hours'][0]}-{r['hours'][-1] + 1}"
            rows.append({"seed": seed, "period": r["period"], "hours": hours, "segmented_RMSE": r["segmented"].rmse, "overall_RMSE": r["overall"].rmse})
            print(f"seed {seed} period {hours}: segmented {r['segmented'].rmse:.3f}  all-hours {r['overall'].rmse:.3f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(args.out, rows)


if __name__ == "__main__":
    main()
