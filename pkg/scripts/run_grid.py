"""Run the default experiment grid (or a subset) and print the results table.

    python3 scripts/run_grid.py --out-dir runs/grid
    python3 scripts/run_grid.py --rows 2c,3c,7c --families rnnt --config cfg.json
"""

import argparse
import json
import logging
import time

from slu.pipeline import PipelineConfig, default_grid, experiment_spec, explain, parse_row, run_grid


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/grid")
    ap.add_argument("--config", help="JSON overrides for PipelineConfig")
    ap.add_argument("--rows", help="comma-separated row labels (default: the full grid)")
    ap.add_argument("--families", default="rnnt,attn")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--explain", action="store_true", help="print the recipes and exit")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    config = PipelineConfig.from_dict(json.load(open(args.config))) if args.config else PipelineConfig()
    if args.rows is None:
        specs = default_grid(config)
    else:
        specs = []
        for row in filter(None, args.rows.split(",")):
            if parse_row(row)[0].startswith("align-"):
                specs.append(experiment_spec(row, "", config))
            else:
                specs += [experiment_spec(row, f, config) for f in args.families.split(",")]
    if args.explain:
        print(explain(specs))
        return
    start = time.perf_counter()
    table, _ = run_grid(specs, config, args.out_dir, jobs=args.jobs)
    print(table, end="")
    print(f"# {len(specs)} rows in {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
