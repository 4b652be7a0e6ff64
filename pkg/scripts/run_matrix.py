"""Time the full method x task matrix from an empty run directory.

    python scripts/run_matrix.py --out runs/matrix [--workers 4]

Equivalent to ``lockin matrix`` plus a wall-clock record in reports/timing.json.
"""
import argparse
import json
import logging
import time
from dataclasses import replace

from lockin import harness as H
from lockin.persist import RunDir


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    ap.add_argument("--out", default="runs/matrix")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = replace(H.load_config(args.config), workers=args.workers).validate()
    run = RunDir(args.out)
    t0 = time.time()
    rep = H.run_matrix(cfg, run, progress=print)
    elapsed = time.time() - t0
    print(rep.table(), end="")
    path = run.path("reports", "timing.json")
    path.write_text(json.dumps({"seconds": elapsed, "workers": args.workers}, indent=1) + "\n")
    print(f"matrix finished in {elapsed / 60:.1f} min")


if __name__ == "__main__":
    main()
