"""Command-line entry point: ``lockin <subcommand> [flags]``.

Exit codes: 0 success, 2 usage, 3 invalid config or input, 4 missing file,
5 run-state or numeric failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness as H
from . import store
from .errors import ConfigError, LockinError, NumericError, StateError, ValidationError
from .persist import RunDir, load_policy, load_trajectory, write_columns
from .sampler import GuidanceConfig
from .vocab import Prompt
from .world import get_task

log = logging.getLogger("lockin")


def _csv(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _csv(text))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="preset name (default, smoke) or YAML file")
    common.add_argument("--out", help="run directory (overrides the config's out_dir)")
    common.add_argument("--tasks", type=_csv, help="comma-separated task ids, e.g. T-A,T-C")
    common.add_argument("--methods", type=_csv, help="comma-separated method names")
    common.add_argument("--seeds", type=_ints, help="comma-separated post-training seeds")
    common.add_argument("--trials", type=int, help="rollouts per cell")
    common.add_argument("--workers", type=int, help="parallel rollout workers")
    common.add_argument("-v", "--verbose", action="store_true")

    guide = argparse.ArgumentParser(add_help=False)
    guide.add_argument("--w", type=float, help="guidance scale")
    guide.add_argument("--no-cpg", action="store_true", help="disable contrastive prompt guidance")
    guide.add_argument("--neg-prompt", type=Prompt.parse, help="contrast prompt as verb/concept/spatial")

    p = argparse.ArgumentParser(prog="lockin", description="Lock-in benchmark: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate broad and narrow demonstration sets")
    sp = sub.add_parser("pretrain", parents=[common], help="pretrain the shared policy on the broad set")
    sp.add_argument("--steps", type=int, help="optimizer steps")
    sp = sub.add_parser("posttrain", parents=[common], help="post-train method checkpoints on narrow sets")
    sp.add_argument("--steps", type=int, help="optimizer steps")
    sp = sub.add_parser("eval", parents=[common, guide], help="evaluate trained checkpoints")
    sp.add_argument("--steps", type=int, help="Euler denoising steps")
    sp.add_argument("--conditions", type=_csv, help="comma-separated: trained,novel,loc-shift,invalid-pos")
    sp.add_argument("--save-traces", action="store_true", help="store every trajectory under traces/")
    sp = sub.add_parser("matrix", parents=[common], help="pretrain, post-train and evaluate the method matrix")
    sp.add_argument("--conditions", type=_csv)
    sub.add_parser("analyze", parents=[common], help="encoder drift and prompt sensitivity of checkpoints")
    sp = sub.add_parser("replay", parents=[common, guide], help="counterfactual replay of a stored trajectory")
    sp.add_argument("--traj", required=True, help="trajectory file written by eval --save-traces")
    sp.add_argument("--steps", type=int, help="Euler denoising steps")
    sp.add_argument("--ckpt", help="policy checkpoint to replay with (default: the trajectory's own)")
    return p


def resolve_config(args) -> H.ExperimentConfig:
    cfg = H.load_config(args.config)
    over = {}
    for name in ("tasks", "methods", "seeds", "trials", "workers"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    if getattr(args, "conditions", None):
        over["conditions"] = args.conditions
    if args.out:
        over["out_dir"] = args.out
    steps = getattr(args, "steps", None)
    if steps is not None:
        if args.command == "pretrain":
            over["pretrain"] = replace(cfg.pretrain, steps=steps, decay_steps=steps)
        elif args.command == "posttrain":
            over["posttrain"] = replace(cfg.posttrain, steps=steps)
        else:
            over["denoise_steps"] = steps
    return replace(cfg, **over).validate()


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for k, r in enumerate(rows):
        print("  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip())
        if k == 0:
            print("  ".join("-" * w for w in widths))


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(cfg, run, args) -> None:
    rows = [["set", "episodes", "chunks", "sha256"]]
    ds = H.broad_data(cfg, run)
    p = run.path("data", "broad.bin")
    rows.append(["broad", ds.size, len(ds.arrays()[0]), run.digest_of(p)[:12]])
    for rep in cfg.seeds:
        for t in cfg.tasks:
            ds = H.narrow_data(cfg, get_task(t), rep, run)
            p = run.path("data", f"narrow_{t}_s{rep}.bin")
            rows.append([p.stem, ds.size, len(ds.arrays()[0]), run.digest_of(p)[:12]])
    _print_table(rows)


def cmd_pretrain(cfg, run, args) -> None:
    t0 = time.time()
    H.get_pretrained(cfg, run)
    p = run.path("ckpts", "pretrained.ckpt")
    _print_table([["checkpoint", "sha256", "seconds"], [str(p), run.digest_of(p)[:12], f"{time.time() - t0:.0f}"]])


def cmd_posttrain(cfg, run, args) -> None:
    pre = H.get_pretrained(cfg, run, allow_train=False)
    modes = list(dict.fromkeys(H.get_method(m).mode for m in cfg.methods if H.get_method(m).mode))
    rows = [["mode", "task", "seed", "drift_l2", "feature_cos"]]
    for mode in modes:
        for rep in cfg.seeds:
            for t in cfg.tasks:
                pol = H.get_posttrained(cfg, pre, mode, get_task(t), rep, run)
                d = H.drift_report(pol)
                rows.append([mode, t, rep, f"{d.drift_norm:.4f}", f"{d.feature_cosine:.4f}"])
    _print_table(rows)


def cmd_eval(cfg, run, args) -> None:
    cpg = False if args.no_cpg else None
    trace_dir = run.root / "traces" if args.save_traces else None
    rep = H.evaluate(cfg, run, w=args.w, cpg=cpg, negative=args.neg_prompt, allow_train=False, trace_dir=trace_dir)
    jp, tp = run.path("reports", "eval.json"), run.path("reports", "eval.txt")
    rep.save(jp, tp)
    run.record(jp, rep.config_digest)
    run.record(tp, rep.config_digest)
    print(rep.table(), end="")
    if rep.failures:
        raise StateError(f"{len(rep.failures)} evaluation unit(s) failed; see {tp}")


def cmd_matrix(cfg, run, args) -> None:
    rep = H.run_matrix(cfg, run, progress=lambda m: log.info(m))
    print(rep.table(), end="")
    if rep.failures:
        raise StateError(f"{len(rep.failures)} matrix unit(s) failed; see {run.path('reports', 'matrix.txt')}")


def cmd_analyze(cfg, run, args) -> None:
    pre = H.get_pretrained(cfg, run, allow_train=False)
    out, rows = [], [["method", "task", "seed", "drift_l2", "feature_cos", "prompt_sens"]]
    for m in cfg.methods:
        method = H.get_method(m)
        for rep in cfg.seeds:
            for t in cfg.tasks:
                task = get_task(t)
                pol = H.method_policy(cfg, method, pre, task, rep, run, allow_train=False)
                d = H.drift_report(pol)
                sens = H.task_prompt_sensitivity(pol, task) if task.novel_prompts else float("nan")
                out.append({"method": m, "task": t, "seed": rep, "drift_sq": d.drift_sq,
                            "feature_cosine": d.feature_cosine, "prompt_sensitivity": sens})
                rows.append([m, t, rep, f"{d.drift_norm:.4f}", f"{d.feature_cosine:.4f}", f"{sens:.4f}"])
    jp = run.path("reports", "analysis.json")
    digest = cfg.digest()
    jp.write_text(json.dumps({"config_digest": digest, "rows": out}, indent=1, sort_keys=True) + "\n")
    run.record(jp, digest)
    _print_table(rows)


def cmd_replay(cfg, run, args) -> None:
    traj_path = Path(args.traj)
    if not traj_path.exists():
        raise FileNotFoundError(f"trajectory {traj_path} not found")
    traj, meta = load_trajectory(traj_path)
    if args.ckpt:
        pol, _ = load_policy(args.ckpt)
    else:
        task = get_task(meta["task"])
        pre = H.get_pretrained(cfg, run, allow_train=False)
        pol = H.method_policy(cfg, H.get_method(meta["method"]), pre, task, meta["rep"], run, allow_train=False)
    pos = Prompt.parse(meta["instruction"])
    neg = args.neg_prompt or Prompt.parse(meta["negative"])
    steps = args.steps or meta["num_steps"]
    w = meta["w"] if args.w is None else args.w
    on = GuidanceConfig(w=w, num_steps=steps, cpg_enabled=not args.no_cpg, pos_prompt=pos, neg_prompt=neg)
    off = GuidanceConfig(num_steps=steps, cpg_enabled=False, pos_prompt=pos)
    rec = H.counterfactual_replay(traj, pol, on, off)
    digest = store.digest({"traj": meta, "guidance": H.effective_guidance(on), "neg": neg.key, "steps": steps})
    stem = traj_path.stem
    out_bin = run.path("traces", f"{stem}.replay.bin")
    arrays = {"on": np.array(rec.chunks_on).reshape(len(rec.chunks_on), -1, 3),
              "off": np.array(rec.chunks_off).reshape(len(rec.chunks_off), -1, 3)}
    store.write(out_bin, arrays, {"config_digest": digest, "source": traj_path.name})
    out_tsv = run.path("traces", f"{stem}.replay.tsv")
    write_columns(out_tsv, H.REPLAY_COLUMNS, rec.rows(), f"config_digest={digest}")
    run.record(out_bin, digest)
    run.record(out_tsv, digest)
    ang = rec.angle[~np.isnan(rec.angle)]
    _print_table([["chunks", "mean_max_abs_diff", "mean_angle_deg", "output"],
                  [len(rec.chunk_diff), f"{rec.chunk_diff.mean() if len(rec.chunk_diff) else 0:.5f}",
                   f"{ang.mean() if len(ang) else 0:.2f}", str(out_tsv)]])


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "posttrain": cmd_posttrain, "eval": cmd_eval,
            "matrix": cmd_matrix, "analyze": cmd_analyze, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        run = RunDir(Path(cfg.out_dir))
        COMMANDS[args.command](cfg, run, args)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return 4
    except (StateError, NumericError) as e:
        print(f"run error: {e}", file=sys.stderr)
        return 5
    except LockinError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
