"""Experiment orchestration: configs, evaluation protocol, the method matrix and mechanistic analyses."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import store
from .errors import ConfigError, StateError
from .nn_core import forward_mlp
from .persist import RunDir, load_policy, save_policy, trajectory_states
from .policy import Policy, PolicyConfig, denormalize_chunk
from .sampler import GuidanceConfig, Trajectory, denoise, expert_actor, policy_actor, rollout
from .trainer import TrainConfig, posttrain, pretrain, pretrain_config, retain_interpolate
from .vocab import UNKNOWN, Prompt
from .world import (BROAD_EXEC_NOISE, GENERATOR_VERSION, NARROW_EXEC_NOISE, DemoSet, TaskSpec, destination, gen_demoset, get_task,
                    load_demoset, make_tasks, obs_vector, resolve, save_demoset)

log = logging.getLogger(__name__)

CONDITIONS = ("trained", "novel", "loc-shift", "invalid-pos")
STAGES = ("gen-data", "pretrain", "posttrain", "eval")
REFERENCE_COLUMN = "generalist-reference"
REFERENCE_MARKER = "not reproducible at desk scale"


# -- methods --------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    """How one matrix row is produced from the shared pretrained policy and sampled at test time."""

    name: str
    mode: str | None             # post-training mode, None for the untouched pretrained policy
    cpg: bool
    interpolate: bool = False    # weight-space interpolation toward the pretrained policy after full_ft


METHODS = {m.name: m for m in (
    MethodSpec("retain", "full_ft", cpg=False, interpolate=True),
    MethodSpec("delock_no_cpg", "delock", cpg=False),
    MethodSpec("no_vis_reg", "no_vis_reg", cpg=True),
    MethodSpec("frozen_vis", "frozen_vis", cpg=True),
    MethodSpec("delock", "delock", cpg=True),
    MethodSpec("no_vis_reg_no_cpg", "no_vis_reg", cpg=False),
    MethodSpec("frozen_vis_no_cpg", "frozen_vis", cpg=False),
    MethodSpec("full_ft", "full_ft", cpg=False),
    MethodSpec("pretrained", None, cpg=False),
)}
DEFAULT_METHODS = ("retain", "delock_no_cpg", "no_vis_reg", "frozen_vis", "delock")


def get_method(name: str) -> MethodSpec:
    try:
        return METHODS[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; expected one of {sorted(METHODS)}") from None


# -- configuration ----------------------------------------------------------------

def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _merge(cls, base, overrides: dict | None):
    if not overrides:
        return base
    known = {f.name for f in fields(cls)}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    return replace(base, **_tuple_fields(overrides))


@dataclass
class ExperimentConfig:
    """Every knob of a run. ``lam`` is the calibrated drift weight used by the delock mode."""

    name: str = "default"
    out_dir: str = "runs/default"
    stages: tuple[str, ...] = STAGES
    policy: PolicyConfig = field(default_factory=lambda: PolicyConfig(time_features=4))
    pretrain: TrainConfig = field(default_factory=pretrain_config)
    posttrain: TrainConfig = field(default_factory=TrainConfig)
    lam: float = 1e-2             # best worst-task gain of the 5-seed sweep (scripts/calibrate_lambda.py)
    w: float = 3.0
    denoise_steps: int = 10
    retain_alpha: float = 0.5
    tasks: tuple[str, ...] = ("T-A", "T-B", "T-C", "T-D", "T-E")
    methods: tuple[str, ...] = DEFAULT_METHODS
    conditions: tuple[str, ...] = ("trained", "novel", "loc-shift")
    trials: int = 20
    seeds: tuple[int, ...] = (0,)
    eval_seed: int = 1000
    broad_episodes: int = 2000
    narrow_episodes: int = 100
    broad_exec_noise: float = BROAD_EXEC_NOISE
    narrow_exec_noise: float = NARROW_EXEC_NOISE
    data_seed: int = 0
    workers: int = 1
    pretrained_ckpt: str | None = None

    def validate(self) -> "ExperimentConfig":
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}")
        known = {t.task_id for t in make_tasks()}
        for t in self.tasks:
            if t not in known:
                raise ConfigError(f"unknown task {t!r}")
        for m in self.methods:
            get_method(m)
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}")
        if self.broad_exec_noise < 0 or self.narrow_exec_noise < 0:
            raise ConfigError("execution noise must be non-negative")
        if self.trials < 0 or self.workers < 1 or self.denoise_steps < 1:
            raise ConfigError("trials must be >= 0, workers and denoise_steps >= 1")
        if not self.lam > 0:
            raise ConfigError("lam must be positive")
        if not 0.0 <= self.retain_alpha <= 1.0:
            raise ConfigError("retain_alpha must lie in [0, 1]")
        if self.w < 0:
            raise ConfigError("guidance scale must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        base = cls()
        policy = _merge(PolicyConfig, base.policy, d.pop("policy", None))
        pre = _merge(TrainConfig, base.pretrain, d.pop("pretrain", None))
        post = _merge(TrainConfig, base.posttrain, d.pop("posttrain", None))
        return replace(base, policy=policy, pretrain=pre, posttrain=post, **_tuple_fields(d)).validate()

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("workers")
        return store.digest(d)


def smoke_config(**overrides) -> ExperimentConfig:
    """Tiny end-to-end setting for tests and demos (seconds, not minutes)."""
    small = PolicyConfig(encoder_hidden=(16,), feature_dim=8, backbone_hidden=(16,), backbone_out=8,
                         expert_hidden=(16,), embed_dim=4)
    base = ExperimentConfig(name="smoke", out_dir="runs/smoke", policy=small,
                            pretrain=pretrain_config(steps=60, warmup_steps=10, decay_steps=60, batch_size=16),
                            posttrain=TrainConfig(steps=20, warmup_steps=5, batch_size=8, backbone_rank=2,
                                                  expert_rank=2),
                            trials=2, broad_episodes=20, narrow_episodes=4)
    return replace(base, **overrides).validate()


PRESETS = {"default": ExperimentConfig, "smoke": smoke_config}


def load_config(name_or_path: str | None) -> ExperimentConfig:
    """A preset name (``default``, ``smoke``) or a YAML file of overrides on the default config."""
    if name_or_path is None or name_or_path in PRESETS:
        return PRESETS[name_or_path or "default"]().validate()
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    import yaml
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    preset = raw.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = PRESETS[preset]().to_dict()
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k].update(v)
        else:
            base[k] = v
    return ExperimentConfig.from_dict(base)


# -- evaluation conditions ------------------------------------------------------

@dataclass(frozen=True)
class Case:
    instruction: Prompt   # what the policy is told (the positive prompt)
    goal: Prompt          # what success is judged against
    negative: Prompt      # the training prompt used as the contrast
    region: str


def garble(prompt: Prompt, reference: Prompt) -> Prompt:
    """Replace every token that distinguishes ``prompt`` from ``reference`` with UNKNOWN."""
    concept = UNKNOWN if prompt.concept != reference.concept else prompt.concept
    spatial = UNKNOWN if prompt.spatial != reference.spatial else prompt.spatial
    return Prompt(prompt.verb, concept, spatial)


def condition_cases(task: TaskSpec, condition: str) -> list[Case]:
    """Prompt/region combinations of one evaluation condition; empty when it does not apply to ``task``."""
    neg = task.train_prompts[0]
    if condition == "trained":
        return [Case(p, p, neg, "id") for p in task.train_prompts]
    if condition == "novel":
        return [Case(p, p, neg, "id") for p in task.novel_prompts]
    if condition == "loc-shift":
        return [Case(p, p, neg, "shifted") for p in task.train_prompts] if task.shifted_region else []
    if condition == "invalid-pos":
        return [Case(garble(p, neg), p, neg, "id") for p in task.novel_prompts]
    raise ConfigError(f"unknown condition {condition!r}")


def trial_seeds(base: int, rep: int, trials: int) -> list[int]:
    return [base + 1000 * rep + i for i in range(trials)]


class ExpertSource:
    """Harness oracle: the scripted expert acting directly on the goal prompt."""

    def __init__(self, sigma: float = 0.0):
        self.sigma = sigma


@dataclass
class TrialRecord:
    method: str
    task: str
    condition: str
    rep: int
    seed: int
    prompt: str
    success: bool
    steps: int
    final_digest: str
    error: str = ""

    @property
    def key(self) -> tuple:
        return (self.method, self.task, self.condition, self.rep, self.seed)


def effective_guidance(guidance: GuidanceConfig) -> dict:
    """Canonical description of the sampler: CPG off and w = 1 are the same computation."""
    if not guidance.cpg_enabled or guidance.w == 1.0:
        return {"cpg": False, "num_steps": guidance.num_steps}
    return {"cpg": True, "w": guidance.w, "num_steps": guidance.num_steps}


def run_trial(source, task: TaskSpec, case: Case, guidance: GuidanceConfig, seed: int,
              keep_traces: bool = False, negative: Prompt | None = None) -> Trajectory:
    rng = np.random.default_rng([seed, 7])
    initial = task.sample_layout(rng, case.region)
    if isinstance(source, ExpertSource):
        actor = expert_actor(case.goal, source.sigma)
    else:
        cfg = replace(guidance, pos_prompt=case.instruction, neg_prompt=negative or case.negative)
        actor = policy_actor(source, cfg, keep_traces)
    return rollout(actor, initial, case.goal, seed, task.max_steps, keep_traces)


def _trial_job(args) -> tuple[TrialRecord, Trajectory | None]:
    source, task_id, condition, guidance, seed, method, rep, keep, negative = args
    task = get_task(task_id)
    cases = condition_cases(task, condition)
    case = cases[seed % len(cases)]
    try:
        traj = run_trial(source, task, case, guidance, seed, negative=negative)
        rec = TrialRecord(method, task_id, condition, rep, seed, case.instruction.key, bool(traj.success),
                          traj.steps, traj.final.digest())
        return rec, (traj if keep else None)
    except Exception as e:  # a faulty trial is a failed trial, not a failed suite
        log.warning("trial %s/%s/%s seed %d errored: %s", method, task_id, condition, seed, e)
        return TrialRecord(method, task_id, condition, rep, seed, case.instruction.key, False, 0, "",
                           f"{type(e).__name__}: {e}"), None


def eval_suite(source, task: TaskSpec, condition: str, guidance: GuidanceConfig, trials: int,
               seeds: list[int] | None = None, method: str = "", rep: int = 0, workers: int = 1,
               trajectories: list | None = None, negative: Prompt | None = None) -> list[TrialRecord]:
    """Run ``trials`` seeded rollouts for one (task, condition) cell.

    Trial ``i`` uses ``seeds[i]``; the prompt is ``cases[seed % len(cases)]`` and the
    layout is drawn from ``[seed, 7]``. Errored trials count as failures.
    ``negative`` overrides the contrast prompt (default: the task's training prompt).
    """
    cases = condition_cases(task, condition)
    if not cases:
        raise ConfigError(f"condition {condition!r} does not apply to {task.task_id}")
    seeds = list(range(trials)) if seeds is None else list(seeds)[:trials]
    if len(seeds) < trials:
        raise ConfigError(f"{trials} trials requested but only {len(seeds)} seeds given")
    keep = trajectories is not None
    jobs = [(source, task.task_id, condition, guidance, s, method, rep, keep, negative) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    if keep:
        trajectories.extend(t for _, t in results)
    return [r for r, _ in results]


# -- reports --------------------------------------------------------------------

@dataclass
class EvalReport:
    """Append-only trial log with aggregated success counts per (method, task, condition)."""

    config_digest: str = ""
    records: list[TrialRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, records) -> None:
        seen = {r.key for r in self.records}
        for r in records:
            if r.key in seen:
                raise StateError(f"trial {r.key} already recorded")
            seen.add(r.key)
            self.records.append(r)

    def cells(self) -> dict[tuple[str, str, str], tuple[int, int]]:
        out: dict = {}
        for r in self.records:
            k = (r.method, r.task, r.condition)
            s, n = out.get(k, (0, 0))
            out[k] = (s + int(r.success), n + 1)
        return out

    def rate(self, method: str, task: str, condition: str, rep: int | None = None) -> float:
        rs = [r for r in self.records if (r.method, r.task, r.condition) == (method, task, condition)
              and (rep is None or r.rep == rep)]
        if not rs:
            raise KeyError((method, task, condition, rep))
        return sum(r.success for r in rs) / len(rs)

    def reps(self) -> list[int]:
        return sorted({r.rep for r in self.records})

    def to_dict(self) -> dict:
        cells = [{"method": m, "task": t, "condition": c, "successes": s, "trials": n}
                 for (m, t, c), (s, n) in sorted(self.cells().items())]
        return {"config_digest": self.config_digest, "cells": cells, "records": [asdict(r) for r in self.records],
                "failures": self.failures, "reference": {REFERENCE_COLUMN: REFERENCE_MARKER}, "extras": self.extras}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rep = cls(d["config_digest"], failures=list(d.get("failures", [])), extras=dict(d.get("extras", {})))
        rep.add(TrialRecord(**r) for r in d["records"])
        return rep

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        cells = self.cells()
        methods = list(dict.fromkeys(m for m, _, _ in cells))
        cols = list(dict.fromkeys((t, c) for _, t, c in sorted(cells, key=lambda k: (k[1], CONDITIONS.index(k[2])))))
        header = ["method"] + [f"{t}:{c}" for t, c in cols] + [REFERENCE_COLUMN]
        rows = [header]
        for m in methods:
            row = [m]
            for t, c in cols:
                s, n = cells.get((m, t, c), (None, None))
                row.append("-" if s is None else f"{s}/{n}")
            rows.append(row + ["n/a*"])
        for f in self.failures:
            rows.append([f["method"]] + ["failed"] * len(cols) + ["n/a*"]) if f["method"] not in methods else None
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.append(f"* {REFERENCE_COLUMN}: {REFERENCE_MARKER}")
        for f in self.failures:
            lines.append(f"! {f['method']} {f.get('task', '')} seed {f.get('rep', '')}: {f['error']}")
        if self.config_digest:
            lines.append(f"config {self.config_digest}")
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path=None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(self.to_json())
        if table_path is not None:
            Path(table_path).write_text(self.table())


# -- pipeline stages ------------------------------------------------------------

def _tasks(cfg: ExperimentConfig) -> list[TaskSpec]:
    return [get_task(t) for t in cfg.tasks]


def _cached_demoset(path, size: int, seed: int, exec_noise: float) -> DemoSet | None:
    """The stored set at ``path`` if it was generated with these settings by the current generator."""
    if path is None or not path.exists():
        return None
    if store.read(path)[1].get("generator_version") != GENERATOR_VERSION:
        return None
    ds = load_demoset(path)
    return ds if (ds.size, ds.seed, ds.exec_noise) == (size, seed, exec_noise) else None


def broad_data(cfg: ExperimentConfig, run: RunDir | None = None) -> DemoSet:
    """Broad multi-task corpus over every prompt of every task (cached in the run directory)."""
    path = run.path("data", "broad.bin") if run else None
    spec = {"n": cfg.broad_episodes, "seed": cfg.data_seed, "exec_noise": cfg.broad_exec_noise,
            "generator": GENERATOR_VERSION}
    ds = _cached_demoset(path, cfg.broad_episodes, cfg.data_seed, cfg.broad_exec_noise)
    if ds is not None:
        return ds
    ds = gen_demoset(make_tasks(), "broad", cfg.broad_episodes, seed=cfg.data_seed, exec_noise=cfg.broad_exec_noise)
    if path is not None:
        save_demoset(path, ds)
        run.record(path, store.digest(spec))
    return ds


def narrow_seed(cfg: ExperimentConfig, rep: int) -> int:
    return cfg.data_seed + 1 + rep


def narrow_data(cfg: ExperimentConfig, task: TaskSpec, rep: int, run: RunDir | None = None) -> DemoSet:
    seed = narrow_seed(cfg, rep)
    path = run.path("data", f"narrow_{task.task_id}_s{rep}.bin") if run else None
    ds = _cached_demoset(path, cfg.narrow_episodes, seed, cfg.narrow_exec_noise)
    if ds is not None:
        return ds
    ds = gen_demoset(task, "narrow", cfg.narrow_episodes, seed=seed, exec_noise=cfg.narrow_exec_noise)
    if path is not None:
        save_demoset(path, ds)
        run.record(path, store.digest({"task": task.task_id, "n": cfg.narrow_episodes, "seed": seed,
                                       "exec_noise": cfg.narrow_exec_noise, "generator": GENERATOR_VERSION}))
    return ds


def _pretrain_digest(cfg: ExperimentConfig) -> str:
    return store.digest({"policy": asdict(cfg.policy), "pretrain": cfg.pretrain.to_dict(),
                         "broad": [cfg.broad_episodes, cfg.data_seed, cfg.broad_exec_noise, GENERATOR_VERSION]})


def get_pretrained(cfg: ExperimentConfig, run: RunDir | None = None, allow_train: bool = True) -> Policy:
    """Load the shared pretrained policy, training it first when the pretrain stage is enabled."""
    if cfg.pretrained_ckpt:
        path = Path(cfg.pretrained_ckpt)
        if not path.exists():
            raise FileNotFoundError(f"pretrained checkpoint {path} not found")
        return load_policy(path)[0]
    digest = _pretrain_digest(cfg)
    path = run.path("ckpts", "pretrained.ckpt") if run else None
    if path is not None and path.exists():
        pol, meta = load_policy(path)
        if meta.get("train_digest") == digest:
            return pol
    if not allow_train:
        raise StateError("no pretrained checkpoint for this config; run pretraining first")
    t0 = time.time()
    pol = pretrain(cfg.pretrain, broad_data(cfg, run), cfg.policy)
    log.info("pretrained in %.0fs", time.time() - t0)
    if path is not None:
        save_policy(path, pol, {"train_digest": digest})
        run.record(path, digest, {"data/broad.bin": run.digest_of(run.path("data", "broad.bin")) or ""})
    return pol


def posttrain_config(cfg: ExperimentConfig, mode: str, rep: int) -> TrainConfig:
    lam = cfg.lam if mode == "delock" else 0.0
    return replace(cfg.posttrain, mode=mode, lam=lam, seed=rep)


def get_posttrained(cfg: ExperimentConfig, pre: Policy, mode: str, task: TaskSpec, rep: int,
                    run: RunDir | None = None, allow_train: bool = True) -> Policy:
    """Post-train (or load the cached result of) one (mode, task, seed) combination."""
    tc = posttrain_config(cfg, mode, rep)
    digest = store.digest({"pre": _pretrain_digest(cfg) if not cfg.pretrained_ckpt else cfg.pretrained_ckpt,
                           "train": tc.to_dict(), "task": task.task_id, "n": cfg.narrow_episodes,
                           "data_seed": narrow_seed(cfg, rep), "exec_noise": cfg.narrow_exec_noise,
                           "generator": GENERATOR_VERSION})
    path = run.path("ckpts", f"{task.task_id}_{mode}_s{rep}.ckpt") if run else None
    if path is not None and path.exists():
        pol, meta = load_policy(path)
        if meta.get("train_digest") == digest:
            return pol
    if not allow_train:
        raise StateError(f"no {mode} checkpoint for {task.task_id} seed {rep}; run post-training first")
    pol = posttrain(tc, pre, narrow_data(cfg, task, rep, run))
    if path is not None:
        save_policy(path, pol, {"train_digest": digest})
        run.record(path, digest)
    return pol


def method_policy(cfg: ExperimentConfig, method: MethodSpec, pre: Policy, task: TaskSpec, rep: int,
                  run: RunDir | None = None, allow_train: bool = True) -> Policy:
    if method.mode is None:
        return pre
    pol = get_posttrained(cfg, pre, method.mode, task, rep, run, allow_train)
    if method.interpolate:
        pol = retain_interpolate(pol, pre, cfg.retain_alpha)
    return pol


def method_guidance(cfg: ExperimentConfig, method: MethodSpec, w: float | None = None,
                    cpg: bool | None = None) -> GuidanceConfig:
    return GuidanceConfig(w=cfg.w if w is None else w, num_steps=cfg.denoise_steps,
                          cpg_enabled=method.cpg if cpg is None else (cpg and method.cpg))


def eval_digest(cfg: ExperimentConfig, guidance: dict[str, GuidanceConfig], negative: Prompt | None = None) -> str:
    """Digest of everything that determines evaluation outputs; equivalent samplers share a digest."""
    d = cfg.to_dict()
    for k in ("out_dir", "workers", "w", "stages", "denoise_steps"):
        d.pop(k)
    d["guidance"] = {m: effective_guidance(g) for m, g in sorted(guidance.items())}
    d["negative"] = negative.key if negative is not None else None
    return store.digest(d)


def evaluate(cfg: ExperimentConfig, run: RunDir | None = None, w: float | None = None, cpg: bool | None = None,
             negative: Prompt | None = None, allow_train: bool = True, trace_dir: Path | None = None,
             progress=None) -> EvalReport:
    """Evaluate every (method, seed, task, condition) cell of ``cfg``.

    ``w``/``cpg`` override the guidance of every method (``cpg=False`` disables it,
    ``cpg=True`` keeps each method's own setting); ``negative`` replaces the
    contrast prompt. A failure while producing or evaluating a (method, task, seed)
    unit is recorded and skips only that unit's cells.
    """
    cfg.validate()
    guidance = {m: method_guidance(cfg, get_method(m), w, cpg) for m in cfg.methods}
    report = EvalReport(eval_digest(cfg, guidance, negative))
    pre = get_pretrained(cfg, run, allow_train=allow_train and "pretrain" in cfg.stages)
    for mname in cfg.methods:
        method = get_method(mname)
        for rep in cfg.seeds:
            for task in _tasks(cfg):
                t0 = time.time()
                try:
                    pol = method_policy(cfg, method, pre, task, rep, run,
                                        allow_train=allow_train and "posttrain" in cfg.stages)
                    for cond in cfg.conditions:
                        if not condition_cases(task, cond):
                            continue
                        trajs = [] if trace_dir is not None else None
                        seeds = trial_seeds(cfg.eval_seed, rep, cfg.trials)
                        report.add(eval_suite(pol, task, cond, guidance[mname], cfg.trials, seeds, mname, rep,
                                              cfg.workers, trajs, negative))
                        if trace_dir is not None:
                            _dump_traces(trace_dir, cfg, method, task, cond, rep, trajs, guidance[mname], negative,
                                         report.config_digest)
                except Exception as e:
                    log.error("%s on %s seed %d failed: %s", mname, task.task_id, rep, e)
                    report.failures.append({"method": mname, "task": task.task_id, "rep": rep,
                                            "error": f"{type(e).__name__}: {e}"})
                if progress is not None:
                    progress(f"{mname:18s} {task.task_id} seed {rep} ({time.time() - t0:.0f}s)")
    return report


def _dump_traces(trace_dir: Path, cfg, method: MethodSpec, task: TaskSpec, cond: str, rep: int, trajs, guidance,
                 negative, digest: str) -> None:
    from .persist import TRAJECTORY_COLUMNS, save_trajectory, trajectory_rows, write_columns
    cases = condition_cases(task, cond)
    for traj in trajs:
        if traj is None:
            continue
        case = cases[traj.seed % len(cases)]
        stem = f"{method.name}_{task.task_id}_{cond}_s{rep}_t{traj.seed}"
        meta = {"config_digest": digest, "method": method.name, "task": task.task_id, "condition": cond, "rep": rep,
                "instruction": case.instruction.key,
                "negative": (negative or case.negative).key, "w": guidance.w, "cpg": guidance.cpg_enabled,
                "num_steps": guidance.num_steps}
        save_trajectory(Path(trace_dir) / f"{stem}.traj", traj, meta)
        write_columns(Path(trace_dir) / f"{stem}.tsv", TRAJECTORY_COLUMNS, trajectory_rows(traj),
                      f"config_digest={digest} success={int(traj.success)}")


def run_matrix(cfg: ExperimentConfig, run: RunDir | None = None, progress=None) -> EvalReport:
    """Post-train every method row from the shared pretrained policy and evaluate every applicable cell."""
    report = evaluate(cfg, run, progress=progress)
    if run is not None:
        jp, tp = run.path("reports", "matrix.json"), run.path("reports", "matrix.txt")
        report.save(jp, tp)
        run.record(jp, report.config_digest)
        run.record(tp, report.config_digest)
    return report


# -- analyses -------------------------------------------------------------------

@dataclass
class DriftMetrics:
    drift_sq: float
    feature_cosine: float

    @property
    def drift_norm(self) -> float:
        return math.sqrt(self.drift_sq)


def sample_observations(n: int = 200, seed: int = 0, tasks: list[TaskSpec] | None = None) -> np.ndarray:
    """``n`` seeded initial-layout observations cycling over ``tasks``."""
    tasks = tasks or make_tasks()
    return np.array([obs_vector(tasks[i % len(tasks)].sample_layout(np.random.default_rng([seed, i])))
                     for i in range(n)])


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / np.maximum(na * nb, 1e-300)


def drift_report(policy: Policy, n_obs: int = 200, seed: int = 0) -> DriftMetrics:
    if policy.encoder_pre is None:
        raise StateError("drift_report needs a policy with a pretrained encoder reference")
    obs = sample_observations(n_obs, seed)
    cur = policy.encode(obs)
    ref = forward_mlp(policy.encoder.spec, policy.encoder_pre, obs, policy.encoder.prefix)
    return DriftMetrics(policy.encoder_drift(), float(np.mean(_cosine(cur, ref))))


def prompt_sensitivity(policy: Policy, obs, p1: Prompt, p2: Prompt) -> float:
    """Cosine distance between backbone outputs under two prompts (mean over rows of ``obs``)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    feats = policy.encode(obs)
    b1 = policy.condition(np.tile(p1.token_ids(), (len(obs), 1)), feats)
    b2 = policy.condition(np.tile(p2.token_ids(), (len(obs), 1)), feats)
    if p1 == p2:
        return 0.0
    return float(np.mean(1.0 - _cosine(b1, b2)))


def task_prompt_sensitivity(policy: Policy, task: TaskSpec, n_obs: int = 200, seed: int = 0) -> float:
    """Sensitivity to the train/novel prompt pair of ``task`` averaged over its layouts."""
    if not task.novel_prompts:
        raise ConfigError(f"{task.task_id} has no novel prompt")
    obs = sample_observations(n_obs, seed, [task])
    return prompt_sensitivity(policy, obs, task.train_prompts[0], task.novel_prompts[0])


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return float("nan")
    return float(np.degrees(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))))


@dataclass
class ReplayRecord:
    chunks_on: list[np.ndarray]
    chunks_off: list[np.ndarray]
    chunk_diff: np.ndarray     # max |on - off| per step, in action units
    angle: np.ndarray          # degrees between first-step displacements (nan when one is zero)

    def rows(self) -> list[tuple]:
        return [(k, float(self.chunk_diff[k]), float(self.angle[k]), *self.chunks_on[k][0, :2],
                 *self.chunks_off[k][0, :2]) for k in range(len(self.chunk_diff))]


REPLAY_COLUMNS = ["chunk", "max_abs_diff", "angle_deg", "on_dx", "on_dy", "off_dx", "off_dy"]


def counterfactual_replay(traj: Trajectory, policy: Policy, guidance_on: GuidanceConfig,
                          guidance_off: GuidanceConfig) -> ReplayRecord:
    """Re-denoise every recorded (observation, noise seed) under two guidance settings."""
    if not traj.observations:
        return ReplayRecord([], [], np.zeros(0), np.zeros(0))
    if len(traj.noise_seeds) != len(traj.observations):
        raise StateError("trajectory lacks one noise seed per observation; replay would not be exact")
    on, off = [], []
    for obs, seed in zip(traj.observations, traj.noise_seeds):
        on.append(denormalize_chunk(denoise(policy, obs, guidance_on, noise_seed=seed)))
        off.append(denormalize_chunk(denoise(policy, obs, guidance_off, noise_seed=seed)))
    diff = np.array([np.max(np.abs(a - b)) for a, b in zip(on, off)])
    ang = np.array([0.0 if np.array_equal(a[0, :2], b[0, :2]) else _angle(a[0, :2], b[0, :2])
                    for a, b in zip(on, off)])
    return ReplayRecord(on, off, diff, ang)


@dataclass
class GoalAlignment:
    steps: list[int]           # chunk indices where the two prompts lead to different destinations
    angle_on: np.ndarray       # angle between CPG-on displacement and direction to the trained goal
    angle_off: np.ndarray

    @property
    def off_closer_fraction(self) -> float:
        ok = ~(np.isnan(self.angle_on) | np.isnan(self.angle_off))
        if not ok.any():
            return float("nan")
        return float(np.mean(self.angle_off[ok] < self.angle_on[ok]))


def goal_alignment(traj: Trajectory, replay: ReplayRecord, trained: Prompt, novel: Prompt) -> GoalAlignment:
    """Compare replayed displacements against the direction to the trained-prompt goal.

    Only transport steps count: the novel prompt's object is held and the two
    prompts send it to different places.
    """
    steps, on, off = [], [], []
    for k, state in enumerate(trajectory_states(traj)):
        t_tr, t_nv = resolve(state, trained), resolve(state, novel)
        d_tr, d_nv = destination(state, t_tr), destination(state, t_nv)
        if state.held != t_nv.source or d_tr is None or d_nv is None or np.allclose(d_tr, d_nv):
            continue
        to_goal = d_tr - state.gripper
        steps.append(k)
        on.append(_angle(replay.chunks_on[k][0, :2], to_goal))
        off.append(_angle(replay.chunks_off[k][0, :2], to_goal))
    return GoalAlignment(steps, np.array(on), np.array(off))
