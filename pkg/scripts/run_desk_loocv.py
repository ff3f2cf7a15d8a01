"""Desk-scale LOOCV: SWI+QSM vs SWI-only on seeded 8-participant phantom cohorts.

    python scripts/run_desk_loocv.py --out runs/desk [--seeds 0 1 2] [--all-seeds]

Writes per-seed reports, manifests and summary.json under --out.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from deepmir.cli import ExperimentConfig
from deepmir.desk import run_seeds, summary_lines

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=HERE / "desk_config.json")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--all-seeds", action="store_true", help="do not stop once the verdict is settled")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = ExperimentConfig.load(args.config)
    t0 = time.perf_counter()
    out = run_seeds(cfg, args.seeds, out_dir=args.out, stop_early=not args.all_seeds)
    for r in out["results"]:
        print(f"seed {r['master_seed']}: {'PASS' if r['passed'] else 'FAIL'} {r['checks']}")
        print("\n".join(summary_lines(r)))
    print(f"{out['passed']}/{len(out['seeds_run'])} seeds passed "
          f"(need {out['need']}); {time.perf_counter() - t0:.0f}s")
    slim = {k: v for k, v in out.items() if k != "results"}
    (args.out / "verdict.json").write_text(json.dumps(slim, indent=2))


if __name__ == "__main__":
    main()
