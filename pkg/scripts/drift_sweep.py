"""Encoder drift norm against the drift weight, averaged over post-training seeds.

    python scripts/drift_sweep.py --out runs/default [--task T-A]
"""
import argparse
import json
import logging

from lockin import harness as H
from lockin import studies as S
from lockin.persist import RunDir


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--task", default="T-A")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = H.load_config(args.config)
    run = RunDir(args.out)
    H.get_pretrained(cfg, run)
    drift = S.drift_sweep(cfg, run, task=args.task, seeds=tuple(int(s) for s in args.seeds.split(",")))
    for lam, d in drift.items():
        print(f"lambda {lam:<8g} drift {d:.5f}")
    print("non-increasing:", S.is_non_increasing(list(drift.values())))
    path = run.path("reports", "drift_sweep.json")
    path.write_text(json.dumps({f"{k:g}": v for k, v in drift.items()}, indent=1) + "\n")
    run.record(path, cfg.digest())


if __name__ == "__main__":
    main()
