"""Multi-seed studies built on the harness: lock-in statistics, drift sweeps, lambda calibration.

Each study returns plain dicts so scripts can dump them as JSON and tests can
assert on them.
"""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import harness as H
from .persist import RunDir
from .trainer import encoder_drift_sq
from .world import get_task

log = logging.getLogger(__name__)

PROBE_TASKS = ("T-A", "T-C")
STUDY_SEEDS = (0, 1, 2, 3, 4)
STUDY_METHODS = ("no_vis_reg_no_cpg", "delock", "frozen_vis", "delock_no_cpg")
DRIFT_LAMBDAS = (0.0, 1e-3, 1e-1, 10.0)
CALIBRATION_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0)

# thresholds of the desk-scale statistical checks
ID_MIN = 0.80
LOCKED_NOVEL_MAX = 0.35
MITIGATION_GAIN = 0.25
MITIGATION_SEEDS = 4
INVALID_GAP = 0.20


def study_config(cfg: H.ExperimentConfig, **overrides) -> H.ExperimentConfig:
    """``cfg`` narrowed to the probe tasks, five seeds and the conditions the checks need."""
    base = replace(cfg, tasks=PROBE_TASKS, seeds=STUDY_SEEDS, methods=STUDY_METHODS,
                   conditions=("trained", "novel", "invalid-pos"))
    return replace(base, **overrides).validate()


def detached(cfg: H.ExperimentConfig, run: RunDir) -> H.ExperimentConfig:
    """``cfg`` reading the run's pretrained checkpoint, for evaluations that must not cache into ``run``."""
    path = run.path("ckpts", "pretrained.ckpt")
    H.get_pretrained(cfg, run, allow_train=False)   # fail early if the checkpoint is missing or stale
    return replace(cfg, pretrained_ckpt=str(path))


def _rates(report: H.EvalReport, method: str, task: str, cond: str, seeds) -> list[float]:
    return [report.rate(method, task, cond, s) for s in seeds]


def lockin_summary(report: H.EvalReport, tasks=PROBE_TASKS, seeds=STUDY_SEEDS) -> dict:
    """Per-task seed-averaged rates and the per-seed mitigation margins."""
    out = {}
    for t in tasks:
        base_id = _rates(report, "no_vis_reg_no_cpg", t, "trained", seeds)
        base_nv = _rates(report, "no_vis_reg_no_cpg", t, "novel", seeds)
        dl_id = _rates(report, "delock", t, "trained", seeds)
        dl_nv = _rates(report, "delock", t, "novel", seeds)
        gain = [a - b for a, b in zip(dl_nv, base_nv)]
        seeds_ok = sum(g >= MITIGATION_GAIN and i >= ID_MIN for g, i in zip(gain, dl_id))
        row = {"locked_id": float(np.mean(base_id)), "locked_novel": float(np.mean(base_nv)),
               "delock_id": float(np.mean(dl_id)), "delock_novel": float(np.mean(dl_nv)),
               "gain_per_seed": gain, "mitigation_seeds": int(seeds_ok),
               "delock_invalid": float(np.mean(_rates(report, "delock", t, "invalid-pos", seeds)))}
        for m in ("frozen_vis", "delock_no_cpg"):
            try:
                row[f"{m}_novel"] = float(np.mean(_rates(report, m, t, "novel", seeds)))
            except KeyError:
                pass
        out[t] = row
    return out


def lockin_checks(summary: dict) -> dict[str, bool]:
    a, c = summary["T-A"], summary["T-C"]
    return {
        "lock-in": all(s["locked_id"] >= ID_MIN and s["locked_novel"] <= LOCKED_NOVEL_MAX for s in (a, c)),
        "mitigation": all(s["mitigation_seeds"] >= MITIGATION_SEEDS for s in (a, c)),
        "ablation-order": c["delock_novel"] > c["frozen_vis_novel"] and c["delock_novel"] > c["delock_no_cpg_novel"],
        "invalid-prompt": all(s["delock_novel"] - s["delock_invalid"] >= INVALID_GAP for s in (a, c)),
    }


def drift_sweep(cfg: H.ExperimentConfig, run: RunDir | None, lams=DRIFT_LAMBDAS, task: str = "T-A",
                seeds=STUDY_SEEDS) -> dict[float, float]:
    """Seed-averaged encoder drift norm per lambda (0 means the unregularized no_vis_reg mode).

    Checkpoints are not cached: every lambda would otherwise fight over one delock slot.
    """
    pre = H.get_pretrained(cfg, run, allow_train=False)
    t = get_task(task)
    out = {}
    for lam in lams:
        mode = "no_vis_reg" if lam == 0 else "delock"
        c = replace(cfg, lam=lam) if lam > 0 else cfg
        norms = []
        for s in seeds:
            pol = H.get_posttrained(c, pre, mode, t, s, None)
            norms.append(encoder_drift_sq(pol) ** 0.5)
        out[lam] = float(np.mean(norms))
        log.info("lambda %g: drift %.4f", lam, out[lam])
    return out


def is_non_increasing(values: list[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def calibrate_lambda(cfg: H.ExperimentConfig, run: RunDir, lams=CALIBRATION_LAMBDAS,
                     tasks=PROBE_TASKS, seeds=STUDY_SEEDS, progress=None) -> dict:
    """Sweep the drift weight and pick the smallest value that meets the mitigation check.

    The unregularized baseline is evaluated once; each lambda then post-trains
    and evaluates delock with guidance. When no value qualifies, the one with the
    largest worst-task gain is reported with ``met = False``.
    """
    scfg = study_config(cfg, tasks=tasks, seeds=seeds, methods=("no_vis_reg_no_cpg",),
                        conditions=("trained", "novel"))
    base = H.evaluate(scfg, run)
    if base.failures:
        raise RuntimeError(f"calibration baseline failed: {base.failures}")
    loose = detached(scfg, run)
    rows = {}
    for lam in lams:
        c = replace(loose, lam=lam, methods=("delock",))
        rep = H.evaluate(c, None, allow_train=True)
        if rep.failures:
            raise RuntimeError(f"calibration at lambda={lam} failed: {rep.failures}")
        merged = H.EvalReport(rep.config_digest, base.records + rep.records)
        per_task = {}
        for t in tasks:
            dl_id = _rates(merged, "delock", t, "trained", seeds)
            gain = [a - b for a, b in zip(_rates(merged, "delock", t, "novel", seeds),
                                          _rates(merged, "no_vis_reg_no_cpg", t, "novel", seeds))]
            per_task[t] = {"delock_id": float(np.mean(dl_id)), "mean_gain": float(np.mean(gain)),
                           "mitigation_seeds": int(sum(g >= MITIGATION_GAIN and i >= ID_MIN
                                                       for g, i in zip(gain, dl_id)))}
        rows[lam] = {"tasks": per_task, "met": all(v["mitigation_seeds"] >= MITIGATION_SEEDS
                                                   for v in per_task.values())}
        if progress is not None:
            progress(f"lambda {lam:g}: " + ", ".join(f"{t} gain {v['mean_gain']:+.2f} id {v['delock_id']:.2f}"
                                                     for t, v in per_task.items()))
    met = [lam for lam in lams if rows[lam]["met"]]
    if met:
        chosen = min(met)
    else:
        chosen = max(lams, key=lambda lam: (min(v["mean_gain"] for v in rows[lam]["tasks"].values()), -lam))
    return {"lambdas": list(lams), "rows": {f"{k:g}": v for k, v in rows.items()}, "chosen": chosen,
            "met": bool(met), "baseline": {t: {"id": float(np.mean(_rates(base, "no_vis_reg_no_cpg", t, "trained",
                                                                            seeds))),
                                             "novel": float(np.mean(_rates(base, "no_vis_reg_no_cpg", t, "novel",
                                                                           seeds)))} for t in tasks}}
