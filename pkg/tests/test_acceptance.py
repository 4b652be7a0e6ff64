"""Acceptance gate: eleven criteria, each recorded as one PASS/FAIL line in the terminal summary.

The exact checks (1-5) run in seconds. The statistical checks (6-10) and the
runtime budget (11) share one full-scale run directory built once per session:
the timed matrix run pretrains and post-trains the seed-0 checkpoints, and the
five-seed study reuses them. Expect about fifteen minutes on one core.
"""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from lockin import harness as H
from lockin import studies as S
from lockin.cli import main as cli
from lockin.nn_core import finite_diff_grad
from lockin.persist import RunDir, load_policy, save_policy
from lockin.policy import Batch, Policy, PolicyConfig, flow_matching_loss, normalize_chunk
from lockin.sampler import GuidanceConfig, denoise, guided_field, noise_chunk, policy_field
from lockin.trainer import TrainConfig, drift_penalty, encoder_drift_sq, posttrain, prepare_posttrain, retain_interpolate
from lockin.vocab import Prompt
from lockin.world import ACTION_DIM, HORIZON, gen_demoset, get_task, make_tasks, obs_vector

P = Prompt.make
BUDGET_MIN = 60.0


def record(gate, n, title, ok, detail):
    gate[n] = (bool(ok), title, detail)
    print(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {title}: {detail}")
    return ok


def _scenes(k=4, seed=0):
    rng = np.random.default_rng(seed)
    return [obs_vector(t.sample_layout(rng)) for t in make_tasks() for _ in range(k)]


class _Field:
    def __init__(self, fn):
        self.fn = fn

    def conditioned_field(self, obs, prompt):
        return lambda a, t: self.fn(a, t)


# -- exact --------------------------------------------------------------------

def test_c01_guidance_degeneracies(gate):
    pol = Policy(H.ExperimentConfig().policy, seed=11)
    pairs = [(P("put", "red"), P("put", "green")), (P("put", "mug", "right"), P("put", "mug", "left"))]
    ok_w1 = ok_w0 = ok_same = True
    for i, obs in enumerate(_scenes()):
        pos, neg = pairs[i % 2]
        a = noise_chunk([i, 0])
        v_pos, v_neg = policy_field(pol, obs, pos)(a, 0.6), policy_field(pol, obs, neg)(a, 0.6)
        ok_w1 &= np.array_equal(guided_field(v_pos, v_neg, 1.0), v_pos)
        ok_w0 &= np.array_equal(guided_field(v_pos, v_neg, 0.0), v_neg)
        plain = denoise(pol, obs, GuidanceConfig(cpg_enabled=False, pos_prompt=pos), noise_seed=[i, 1])
        for w in (0.0, 2.0, 3.0, 5.0):
            same = GuidanceConfig(w=w, pos_prompt=pos, neg_prompt=pos)
            ok_same &= np.array_equal(denoise(pol, obs, same, noise_seed=[i, 1]), plain)
        w1 = GuidanceConfig(w=1.0, pos_prompt=pos, neg_prompt=neg)
        ok_w1 &= np.array_equal(denoise(pol, obs, w1, noise_seed=[i, 1]), plain)
    ok = ok_w1 and ok_w0 and ok_same
    record(gate, 1, "guidance degeneracies", ok, f"w=1 bitwise {ok_w1}, w=0 bitwise {ok_w0}, tau+=tau- {ok_same}")
    assert ok


def test_c02_delock_gradient(gate):
    pre = Policy(PolicyConfig(), seed=21)
    pre.freeze_encoder_reference()
    pol = prepare_posttrain(TrainConfig(mode="delock", lam=0.5), pre)
    rng = np.random.default_rng(3)
    for b in pol.blocks():
        b.values += rng.normal(0.0, 0.02, b.values.size)   # move off the reference and off B = 0
        b.trainable = True                                   # differentiate w.r.t. every parameter
    ds = gen_demoset(get_task("T-A"), "narrow", 1, seed=0)
    obs, acts, toks = ds.arrays()
    batch = Batch(obs[:2], normalize_chunk(acts[:2]), toks[:2])
    t, eps = np.array([0.83, 0.27]), rng.standard_normal((2, HORIZON, ACTION_DIM))

    def objective():
        return flow_matching_loss(pol, batch, t=t, eps=eps, backward=False) + drift_penalty(pol, 0.5, False)

    t0 = time.time()
    pol.zero_grads()
    flow_matching_loss(pol, batch, t=t, eps=eps)
    drift_penalty(pol, 0.5)
    numeric = finite_diff_grad(objective, pol.blocks())
    worst, where = 0.0, ""
    for b in pol.blocks():
        rel = np.linalg.norm(b.grad - numeric[b.name]) / max(np.linalg.norm(numeric[b.name]), 1e-12)
        if rel > worst:
            worst, where = rel, b.name
    n, secs = sum(b.values.size for b in pol.blocks()), time.time() - t0
    ok = worst < 1e-3 and secs < 60.0
    record(gate, 2, "drift-regularized objective gradient", ok,
           f"max relative error {worst:.2e} ({where}) over {n} parameters in {secs:.0f}s (limit 60s)")
    assert ok


def test_c03_euler_oracle(gate):
    src = _Field(lambda a, t: a)   # contracts by (1 - 1/n) per step under a <- a + delta v, delta = -1/n
    eps = noise_chunk([7, 3])
    out = denoise(src, None, GuidanceConfig(cpg_enabled=False, pos_prompt=P("put", "pot")), noise=eps)
    err10 = float(np.max(np.abs(out - eps * 0.9 ** 10)))
    exact = eps * math.exp(-1.0)

    def gap(n):
        cfg = GuidanceConfig(cpg_enabled=False, num_steps=n, pos_prompt=P("put", "pot"))
        return float(np.max(np.abs(denoise(src, None, cfg, noise=eps) - exact)))

    r1, r2 = gap(10) / gap(20), gap(20) / gap(40)
    ok = err10 <= 1e-12 and 1.7 <= r1 <= 2.3 and 1.7 <= r2 <= 2.3
    record(gate, 3, "Euler oracle", ok, f"|out - eps*0.9^10| = {err10:.1e}, halving ratios {r1:.3f}, {r2:.3f}")
    assert ok


def test_c04_freeze_and_interpolation(gate):
    cfg = H.smoke_config()
    pre = H.get_pretrained(cfg)
    ds = H.narrow_data(cfg, get_task("T-C"), 0)
    frozen = posttrain(replace(cfg.posttrain, mode="frozen_vis", lam=0.0), pre, ds)
    enc_same = all(np.array_equal(a.values, b.values) for a, b in zip(frozen.encoder_blocks(), pre.encoder_blocks()))
    ft = posttrain(replace(cfg.posttrain, mode="full_ft", lam=0.0), pre, ds)
    changed = any(not np.array_equal(a.values, b.values) for a, b in zip(ft.blocks(), pre.blocks()))
    r0, r1 = retain_interpolate(ft, pre, 0.0), retain_interpolate(ft, pre, 1.0)
    end0 = all(np.array_equal(a.values, b.values) for a, b in zip(r0.blocks(), pre.blocks()))
    end1 = all(np.array_equal(a.values, b.values) for a, b in zip(r1.blocks(), ft.blocks()))
    ok = enc_same and changed and end0 and end1
    record(gate, 4, "freeze / interpolation contracts", ok,
           f"frozen encoder bitwise {enc_same}, alpha=0 -> pretrained {end0}, alpha=1 -> fine-tuned {end1}")
    assert ok


def _pipeline(root: Path) -> dict[str, bytes]:
    base = ["--config", "smoke", "--out", str(root), "--tasks", "T-A,T-C"]
    for cmd in (["gen-data"], ["pretrain"], ["posttrain"], ["eval"], ["matrix"], ["analyze"]):
        assert cli(cmd + base) == 0
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c05_determinism(gate, tmp_path, study_run):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same_small = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    # full scale: re-train one cached checkpoint and compare the serialized bytes
    cfg, run = study_run
    pre = H.get_pretrained(cfg, run, allow_train=False)
    again = posttrain(H.posttrain_config(cfg, "delock", 0), pre, H.narrow_data(cfg, get_task("T-A"), 0))
    cached = run.path("ckpts", "T-A_delock_s0.ckpt")
    meta = load_policy(cached)[1]
    save_policy(tmp_path / "again.ckpt", again, {"train_digest": meta["train_digest"]})
    same_full = (tmp_path / "again.ckpt").read_bytes() == cached.read_bytes()
    ok = same_small and same_full
    record(gate, 5, "determinism", ok, f"{len(a)} pipeline artifacts byte-identical {same_small}, "
                                       f"full-scale checkpoint byte-identical {same_full}")
    assert ok


# -- statistical, full scale --------------------------------------------------

@pytest.fixture(scope="session")
def matrix_run(tmp_path_factory):
    """The default 5-method x 5-task matrix from an empty directory, timed."""
    cfg = H.ExperimentConfig()
    run = RunDir(tmp_path_factory.mktemp("acceptance"))
    t0 = time.time()
    report = H.run_matrix(cfg, run)
    return cfg, run, report, time.time() - t0


@pytest.fixture(scope="session")
def study_run(matrix_run):
    cfg, run, _, _ = matrix_run
    return cfg, run


@pytest.fixture(scope="session")
def study(study_run):
    cfg, run = study_run
    rep = H.evaluate(S.study_config(cfg), run)
    assert not rep.failures, rep.failures
    rep.save(run.path("reports", "study.json"))
    return S.lockin_summary(rep)


def _fmt(x):
    return f"{100 * x:.0f}%"


def test_c06_lockin_reproduction(gate, study):
    a, c = study["T-A"], study["T-C"]
    ok = S.lockin_checks(study)["lock-in"]
    record(gate, 6, "lock-in reproduction", ok,
           f"T-A ID {_fmt(a['locked_id'])} novel {_fmt(a['locked_novel'])}; "
           f"T-C ID {_fmt(c['locked_id'])} novel {_fmt(c['locked_novel'])} "
           f"(need ID >= {_fmt(S.ID_MIN)}, novel <= {_fmt(S.LOCKED_NOVEL_MAX)})")
    assert ok


def test_c07_mitigation(gate, study):
    parts = []
    for t in S.PROBE_TASKS:
        s = study[t]
        parts.append(f"{t} novel {_fmt(s['locked_novel'])} -> {_fmt(s['delock_novel'])}, ID {_fmt(s['delock_id'])}, "
                     f"{s['mitigation_seeds']}/5 seeds ok")
    ok = S.lockin_checks(study)["mitigation"]
    record(gate, 7, "delock mitigation", ok, "; ".join(parts) + f" (need +{_fmt(S.MITIGATION_GAIN)} on 4/5 seeds)")
    assert ok


def test_c08_ablation_order(gate, study):
    c = study["T-C"]
    ok = S.lockin_checks(study)["ablation-order"]
    record(gate, 8, "ablation ordering on T-C novel", ok,
           f"delock {_fmt(c['delock_novel'])}, frozen_vis {_fmt(c['frozen_vis_novel'])}, "
           f"w/o CPG {_fmt(c['delock_no_cpg_novel'])}")
    assert ok


def test_c09_drift_monotonicity(gate, study_run):
    cfg, run = study_run
    drift = S.drift_sweep(cfg, run)
    pre = H.get_pretrained(cfg, run, allow_train=False)
    frozen = [encoder_drift_sq(H.get_posttrained(cfg, pre, "frozen_vis", get_task(t), 0, run)) for t in cfg.tasks]
    ok = S.is_non_increasing(list(drift.values())) and all(d == 0.0 for d in frozen)
    record(gate, 9, "drift monotone in lambda", ok,
           ", ".join(f"{k:g}: {v:.4f}" for k, v in drift.items()) + f"; frozen_vis drift {max(frozen):g}")
    assert ok


def test_c10_invalid_positive_prompt(gate, study):
    parts = [f"{t} valid {_fmt(study[t]['delock_novel'])} vs UNKNOWN {_fmt(study[t]['delock_invalid'])}"
             for t in S.PROBE_TASKS]
    ok = S.lockin_checks(study)["invalid-prompt"]
    record(gate, 10, "invalid positive prompt", ok, "; ".join(parts) + f" (need a gap >= {_fmt(S.INVALID_GAP)})")
    assert ok


def test_c11_runtime_budget(gate, matrix_run):
    cfg, _, report, seconds = matrix_run
    cells = len(report.cells())
    ok = seconds <= BUDGET_MIN * 60 and not report.failures and {m for m, _, _ in report.cells()} == set(cfg.methods)
    record(gate, 11, "matrix runtime", ok,
           f"{len(cfg.methods)} methods x {len(cfg.tasks)} tasks, {cells} cells in {seconds / 60:.1f} min "
           f"(budget {BUDGET_MIN:.0f} min, single core)")
    assert ok
