"""Simulate device records for a synthetic city and report the preprocessing diagnostics.

    python3 scripts/run_preprocess.py --seed 0
"""

import argparse
import json

from popmap.config import desk_preset
from popmap.experiments import build_world, preprocess_records


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = desk_preset(args.seed)
    world = build_world(cfg)
    _, summary = preprocess_records(world, cfg.dropout_profile, args.seed)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
