"""Static mapper vs flat LSTM vs time-embedded LSTM on held-out days.

    python3 scripts/run_temporal.py --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

from popmap.config import desk_preset
from popmap.evaluation import FoldPlan, compute_metrics, format_table, write_report_csv
from popmap.experiments import SrcnnPipeline, build_world, diurnal_range_ratio, residential_cells, temporal_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/temporal.csv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for seed in args.seeds:
        cfg = desk_preset(seed)
        world = build_world(cfg)
        plan = FoldPlan(world.truth.days, cfg.n_folds, seed)
        train = world.truth.select(days=plan.train_days(args.fold))
        test = world.truth.select(days=plan.test_days(args.fold))
        mapper = SrcnnPipeline(world, cfg.srcnn).fit(train)
        out = temporal_experiment(world, mapper, train, test, cfg.temporal)
        cells = residential_cells(world)
        for name in ("static", "flat", "time"):
            pred = getattr(out, name)
            rows.append(
                {
                    "seed": seed,
                    "model": name,
                    **compute_metrics(pred, test).row(),
                    "residential_range_ratio": diurnal_range_ratio(pred, test, cells),
                }
            )

    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(args.out, rows)
    print(format_table(rows, ["seed", "model"], ["RMSE", "NRMSE", "Corr", "residential_range_ratio"]))


if __name__ == "__main__":
    main()
