"""Sweep the drift weight over {1e-3, 1e-2, 1e-1, 1, 10} and report the smallest value that mitigates lock-in.

    python scripts/calibrate_lambda.py --out runs/default [--seeds 0,1,2,3,4]

Pretrains into the run directory if needed; writes reports/lambda_calibration.json.
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
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--lambdas", default=",".join(f"{x:g}" for x in S.CALIBRATION_LAMBDAS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = H.load_config(args.config)
    run = RunDir(args.out)
    H.get_pretrained(cfg, run)
    res = S.calibrate_lambda(cfg, run, tuple(float(x) for x in args.lambdas.split(",")),
                             seeds=tuple(int(s) for s in args.seeds.split(",")), progress=print)
    path = run.path("reports", "lambda_calibration.json")
    path.write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    run.record(path, cfg.digest())
    print(f"chosen lambda {res['chosen']:g} ({'meets' if res['met'] else 'does not meet'} the mitigation check)")


if __name__ == "__main__":
    main()
