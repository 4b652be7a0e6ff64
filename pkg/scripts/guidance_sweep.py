"""Novel-prompt success against the guidance scale w in {1, 2, 3, 5}.

    python scripts/guidance_sweep.py --out runs/default [--methods delock,no_vis_reg,frozen_vis]

Uses (and if needed trains) the run's checkpoints; writes reports/guidance_sweep.json.
"""
import argparse
import json
import logging
from dataclasses import replace

from lockin import harness as H
from lockin.persist import RunDir


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--methods", default="delock,no_vis_reg,frozen_vis")
    ap.add_argument("--tasks", default="T-A,T-C")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--ws", default="1,2,3,5")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = replace(H.load_config(args.config), methods=tuple(args.methods.split(",")),
                  tasks=tuple(args.tasks.split(",")), seeds=tuple(int(s) for s in args.seeds.split(",")),
                  conditions=("novel",)).validate()
    run = RunDir(args.out)
    out = {}
    for w in (float(x) for x in args.ws.split(",")):
        rep = H.evaluate(cfg, run, w=w)
        for (m, t, _), (s, n) in sorted(rep.cells().items()):
            out.setdefault(m, {}).setdefault(t, {})[f"{w:g}"] = s / n
            print(f"w {w:<4g} {m:12s} {t} novel {s}/{n}")
    path = run.path("reports", "guidance_sweep.json")
    path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    run.record(path, cfg.digest())


if __name__ == "__main__":
    main()
