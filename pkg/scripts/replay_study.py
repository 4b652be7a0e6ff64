"""Counterfactual replay: how much of each guided rollout's motion comes from the guidance term.

    python scripts/replay_study.py --out runs/default [--method delock --task T-C]

Re-denoises every stored observation of the guided novel-prompt rollouts with
guidance switched off (same noise), then measures whether the guided or the
plain chunks head toward the trained destination while the object is carried.
"""
import argparse
import json
import logging
from dataclasses import replace

import numpy as np

from lockin import harness as H
from lockin.persist import RunDir
from lockin.sampler import GuidanceConfig
from lockin.world import get_task


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="default")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--method", default="delock")
    ap.add_argument("--task", default="T-C")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=20)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = replace(H.load_config(args.config), trials=args.trials).validate()
    run = RunDir(args.out)
    task, method = get_task(args.task), H.get_method(args.method)
    pre = H.get_pretrained(cfg, run)
    pol = H.method_policy(cfg, method, pre, task, args.seed, run)
    guided = H.method_guidance(cfg, method, cpg=True)
    trajs = []
    H.eval_suite(pol, task, "novel", guided, cfg.trials, H.trial_seeds(cfg.eval_seed, args.seed, cfg.trials),
                 method.name, args.seed, trajectories=trajs)
    cases = H.condition_cases(task, "novel")
    rows = []
    for traj in trajs:
        if traj is None:
            continue
        case = cases[traj.seed % len(cases)]
        on = replace(guided, pos_prompt=case.instruction, neg_prompt=case.negative)
        off = GuidanceConfig(num_steps=guided.num_steps, cpg_enabled=False, pos_prompt=case.instruction)
        rec = H.counterfactual_replay(traj, pol, on, off)
        ga = H.goal_alignment(traj, rec, case.negative, case.goal)
        rows.append({"seed": traj.seed, "success": traj.success, "mean_chunk_diff": float(rec.chunk_diff.mean()),
                     "transport_steps": ga.steps, "angle_on": ga.angle_on, "angle_off": ga.angle_off,
                     "off_closer_fraction": ga.off_closer_fraction})
    carried = [r for r in rows if r["transport_steps"]]
    summary = {"trials": len(rows), "successes": int(sum(r["success"] for r in rows)),
               "mean_chunk_diff": float(np.mean([r["mean_chunk_diff"] for r in rows])) if rows else 0.0,
               "mean_angle_on": float(np.mean([r["angle_on"] for r in carried])) if carried else None,
               "mean_angle_off": float(np.mean([r["angle_off"] for r in carried])) if carried else None}
    path = run.path("reports", f"replay_{method.name}_{task.task_id}.json")
    path.write_text(json.dumps({"summary": summary, "trials": rows}, indent=1, sort_keys=True) + "\n")
    run.record(path, cfg.digest())
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
