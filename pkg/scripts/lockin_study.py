"""Five-seed lock-in study on the concept (T-A) and spatial (T-C) probes.

    python scripts/lockin_study.py --out runs/default

Evaluates the unregularized no-guidance baseline, delock, delock without
guidance and frozen-encoder guidance on trained, novel and UNKNOWN-token prompts.
Writes reports/study.json (every trial) and reports/study_summary.json.
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
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = S.study_config(H.load_config(args.config), workers=args.workers)
    run = RunDir(args.out)
    rep = H.evaluate(cfg, run, progress=print)
    rep.save(run.path("reports", "study.json"), run.path("reports", "study.txt"))
    summary = S.lockin_summary(rep)
    checks = S.lockin_checks(summary)
    out = run.path("reports", "study_summary.json")
    out.write_text(json.dumps({"summary": summary, "checks": checks}, indent=1, sort_keys=True) + "\n")
    for p in ("study.json", "study.txt", "study_summary.json"):
        run.record(run.path("reports", p), rep.config_digest)
    print(rep.table(), end="")
    for t, row in summary.items():
        print(t, {k: (round(v, 3) if isinstance(v, float) else v) for k, v in row.items()})
    for name, ok in checks.items():
        print(f"{name:15s} {'yes' if ok else 'no'}")


if __name__ == "__main__":
    main()
