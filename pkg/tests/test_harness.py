import json
from dataclasses import replace

import numpy as np
import pytest

from lockin import harness as H
from lockin.errors import ConfigError, StateError
from lockin.persist import (RunDir, load_policy, load_trajectory, read_columns, save_policy, save_trajectory,
                            trajectory_rows, write_columns)
from lockin.sampler import GuidanceConfig, denoise, rollout_policy
from lockin.trainer import TrainConfig, _fit, posttrain, prepare_posttrain
from lockin.vocab import UNKNOWN, Prompt
from lockin.world import get_task, make_tasks

P = Prompt.make


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    return RunDir(tmp_path_factory.mktemp("run"))


@pytest.fixture(scope="module")
def cfg(run):
    return H.smoke_config(out_dir=str(run.root), tasks=("T-A", "T-C"))


@pytest.fixture(scope="module")
def pre(cfg, run):
    return H.get_pretrained(cfg, run)


# -- config -------------------------------------------------------------------

def test_default_config_is_valid():
    c = H.ExperimentConfig().validate()
    assert c.trials == 20 and c.w == 3.0 and c.methods == H.DEFAULT_METHODS
    assert c.narrow_episodes == 100 and c.broad_episodes == 2000


@pytest.mark.parametrize("bad", [{"tasks": ["T-Z"]}, {"methods": ["nope"]}, {"conditions": ["sideways"]},
                                 {"trials": -1}, {"lam": 0.0}, {"retain_alpha": 2.0}, {"stages": ["fly"]},
                                 {"surprise": 1}, {"posttrain": {"nonsense": 1}}])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        H.ExperimentConfig.from_dict(bad)


def test_yaml_overrides(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("preset: smoke\nlam: 0.5\ntasks: [T-B]\nposttrain:\n  steps: 7\n")
    c = H.load_config(str(f))
    assert c.lam == 0.5 and c.tasks == ("T-B",) and c.posttrain.steps == 7
    assert c.policy == H.smoke_config().policy
    with pytest.raises(FileNotFoundError):
        H.load_config(str(tmp_path / "missing.yaml"))


def test_config_digest_tracks_content_only():
    a = H.smoke_config()
    assert a.digest() == replace(a, workers=4, out_dir="elsewhere").digest()
    assert a.digest() != replace(a, lam=0.2).digest()


# -- conditions ---------------------------------------------------------------

def test_garble_targets_the_distinguishing_token():
    a, c = get_task("T-A"), get_task("T-C")
    assert H.garble(a.novel_prompts[0], a.train_prompts[0]) == Prompt(0, UNKNOWN, 0)
    g = H.garble(c.novel_prompts[0], c.train_prompts[0])
    assert g.spatial == UNKNOWN and g.concept == c.novel_prompts[0].concept


def test_condition_cases():
    for t in make_tasks():
        assert bool(H.condition_cases(t, "loc-shift")) == t.shifted_region
        assert all(c.region == "id" for c in H.condition_cases(t, "novel"))
        for case in H.condition_cases(t, "invalid-pos"):
            assert case.goal in t.novel_prompts and case.instruction != case.goal
    with pytest.raises(ConfigError):
        H.condition_cases(get_task("T-A"), "upside-down")


# -- eval_suite ---------------------------------------------------------------

def test_zero_trials_is_empty(pre):
    assert H.eval_suite(pre, get_task("T-A"), "trained", GuidanceConfig(), 0) == []


@pytest.mark.parametrize("task", make_tasks(), ids=lambda t: t.task_id)
def test_expert_source_solves_every_condition(task):
    for cond in H.CONDITIONS:
        if not H.condition_cases(task, cond):
            continue
        rows = H.eval_suite(H.ExpertSource(), task, cond, GuidanceConfig(), 20)
        assert sum(r.success for r in rows) == 20, cond


def test_same_seeds_same_rows(pre):
    t = get_task("T-C")
    a = H.eval_suite(pre, t, "novel", GuidanceConfig(), 3, seeds=[5, 6, 7])
    b = H.eval_suite(pre, t, "novel", GuidanceConfig(), 3, seeds=[5, 6, 7])
    assert a == b
    assert [r.seed for r in a] == [5, 6, 7]


def test_parallel_workers_match_serial(pre):
    t = get_task("T-A")
    serial = H.eval_suite(pre, t, "trained", GuidanceConfig(), 3)
    assert H.eval_suite(pre, t, "trained", GuidanceConfig(), 3, workers=2) == serial


class Broken:
    def conditioned_field(self, obs, prompt):
        raise RuntimeError("sensor fault")


def test_errored_trials_count_as_failures():
    rows = H.eval_suite(Broken(), get_task("T-A"), "trained", GuidanceConfig(), 4)
    assert len(rows) == 4 and not any(r.success for r in rows)
    assert all("sensor fault" in r.error for r in rows)


def test_condition_must_apply():
    with pytest.raises(ConfigError):
        H.eval_suite(H.ExpertSource(), get_task("T-A"), "loc-shift", GuidanceConfig(), 1)


# -- reports ------------------------------------------------------------------

def _rec(method="m", seed=0, success=True):
    return H.TrialRecord(method, "T-A", "trained", 0, seed, "put/green/NULL", success, 10, "abc")


def test_report_is_append_only_and_counts_match():
    rep = H.EvalReport("d")
    rep.add([_rec(seed=0), _rec(seed=1, success=False)])
    with pytest.raises(StateError):
        rep.add([_rec(seed=1)])
    assert rep.cells() == {("m", "T-A", "trained"): (1, 2)}
    assert rep.rate("m", "T-A", "trained") == 0.5


def test_report_round_trip_and_table(tmp_path):
    rep = H.EvalReport("digest1")
    rep.add([_rec(seed=i, success=i % 2 == 0) for i in range(4)])
    rep.save(tmp_path / "r.json", tmp_path / "r.txt")
    back = H.EvalReport.load(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
    text = (tmp_path / "r.txt").read_text()
    assert "2/4" in text and H.REFERENCE_MARKER in text and "digest1" in text
    assert json.loads(rep.to_json())["reference"] == {H.REFERENCE_COLUMN: H.REFERENCE_MARKER}


# -- matrix -------------------------------------------------------------------

def test_minimal_matrix_is_one_cell(cfg, run):
    c = replace(cfg, methods=("delock",), tasks=("T-A",), conditions=("trained",))
    rep = H.run_matrix(c, run)
    assert list(rep.cells()) == [("delock", "T-A", "trained")]
    assert json.loads(run.path("reports", "matrix.json").read_text())["cells"][0]["trials"] == c.trials


def test_w1_delock_equals_no_cpg_row(cfg, run):
    c = replace(cfg, methods=("delock", "delock_no_cpg"), conditions=("novel",), trials=3)
    rep = H.evaluate(c, run, w=1.0)
    strip = lambda m: [replace(r, method="") for r in rep.records if r.method == m]  # noqa: E731
    assert strip("delock") == strip("delock_no_cpg")


def test_failure_aborts_only_that_unit(cfg, run, monkeypatch):
    real = H.get_posttrained

    def flaky(c, pre, mode, task, rep, run=None, allow_train=True):
        if task.task_id == "T-C" and mode == "frozen_vis":
            raise RuntimeError("disk full")
        return real(c, pre, mode, task, rep, run, allow_train)

    monkeypatch.setattr(H, "get_posttrained", flaky)
    c = replace(cfg, methods=("frozen_vis", "no_vis_reg"), conditions=("trained",))
    rep = H.evaluate(c, run)
    assert set(rep.cells()) == {("frozen_vis", "T-A", "trained"), ("no_vis_reg", "T-A", "trained"),
                                ("no_vis_reg", "T-C", "trained")}
    assert rep.failures == [{"method": "frozen_vis", "task": "T-C", "rep": 0, "error": "RuntimeError: disk full"}]
    assert "disk full" in rep.table()


def test_stage_needs_checkpoint(cfg, tmp_path):
    c = replace(cfg, stages=("eval",))
    with pytest.raises(StateError):
        H.evaluate(c, RunDir(tmp_path))


def test_zero_lambda_delock_matches_no_vis_reg_losses(pre, cfg):
    ds = H.narrow_data(cfg, get_task("T-A"), 0)
    tc = TrainConfig(mode="no_vis_reg", lam=0.0, steps=15, batch_size=8, warmup_steps=3, backbone_rank=2,
                     expert_rank=2, log_every=1)
    rows_nvr = []
    posttrain(tc, pre, ds, log_rows=rows_nvr)
    dl = replace(tc, mode="delock", lam=0.5)
    rows_dl = _fit(prepare_posttrain(dl, pre), dl, ds, lam=0.0)
    assert [(r.loss, r.bc_loss, r.penalty) for r in rows_dl] == [(r.loss, r.bc_loss, r.penalty) for r in rows_nvr]
    assert all(r.penalty == 0.0 for r in rows_dl)


# -- analyses -----------------------------------------------------------------

def test_drift_report_identity_and_freeze(pre, cfg, run):
    d = H.drift_report(pre)
    assert d.drift_sq == 0.0 and d.feature_cosine == pytest.approx(1.0, abs=1e-12)
    fv = H.get_posttrained(cfg, pre, "frozen_vis", get_task("T-A"), 0, run)
    assert H.drift_report(fv).drift_sq == 0.0
    nvr = H.get_posttrained(cfg, pre, "no_vis_reg", get_task("T-A"), 0, run)
    m = H.drift_report(nvr)
    assert m.drift_sq > 0 and m.feature_cosine < 1.0


def test_drift_report_needs_reference(cfg):
    from lockin.policy import Policy
    with pytest.raises(StateError):
        H.drift_report(Policy(cfg.policy))


def test_prompt_sensitivity_identity_and_symmetry(pre):
    obs = H.sample_observations(20, seed=3)
    a, b = P("put", "red"), P("put", "mug", "left")
    assert H.prompt_sensitivity(pre, obs, a, a) == 0.0
    assert H.prompt_sensitivity(pre, obs, a, b) == H.prompt_sensitivity(pre, obs, b, a) > 0


def _traj(policy, w=3.0, seed=4):
    t = get_task("T-C")
    g = GuidanceConfig(w=w).with_prompts(t.novel_prompts[0], t.train_prompts[0])
    return rollout_policy(policy, t, g, seed=seed, max_steps=40)


def test_replay_degeneracies(pre):
    t = get_task("T-C")
    tr, nv = t.train_prompts[0], t.novel_prompts[0]
    traj = _traj(pre)
    off = GuidanceConfig(cpg_enabled=False, pos_prompt=nv)
    rec = H.counterfactual_replay(traj, pre, GuidanceConfig(w=1.0, pos_prompt=nv, neg_prompt=tr), off)
    assert len(rec.chunk_diff) == len(traj.observations) and not rec.chunk_diff.any()
    assert not np.any(rec.angle)
    rec = H.counterfactual_replay(traj, pre, GuidanceConfig(w=3.0, pos_prompt=nv, neg_prompt=nv), off)
    assert not rec.chunk_diff.any()
    rec = H.counterfactual_replay(traj, pre, GuidanceConfig(w=3.0, pos_prompt=nv, neg_prompt=tr), off)
    assert rec.chunk_diff.max() > 0


def test_replay_needs_noise_seeds(pre):
    traj = _traj(pre)
    traj.noise_seeds = traj.noise_seeds[:-1]
    with pytest.raises(StateError):
        H.counterfactual_replay(traj, pre, GuidanceConfig(pos_prompt=P("put", "red")),
                                GuidanceConfig(pos_prompt=P("put", "red")))


def test_goal_alignment_counts_only_diverging_steps(pre):
    t = get_task("T-C")
    traj = _traj(pre)
    nv, tr = t.novel_prompts[0], t.train_prompts[0]
    rec = H.counterfactual_replay(traj, pre, GuidanceConfig(w=3.0, pos_prompt=nv, neg_prompt=tr),
                                  GuidanceConfig(cpg_enabled=False, pos_prompt=nv))
    al = H.goal_alignment(traj, rec, tr, nv)
    from lockin.persist import trajectory_states
    held = [k for k, s in enumerate(trajectory_states(traj)) if s.held >= 0]
    assert al.steps == held
    assert len(al.angle_on) == len(al.angle_off) == len(al.steps)


def test_goal_alignment_with_expert_trajectory():
    # expert transport steps head straight for the novel plate: CPG-off/on both equal the expert here
    from lockin.sampler import expert_actor, rollout
    t = get_task("T-C")
    nv, tr = t.novel_prompts[0], t.train_prompts[0]
    s0 = t.sample_layout(np.random.default_rng([0, 7]))
    traj = rollout(expert_actor(nv), s0, nv, 0, t.max_steps)
    rec = H.ReplayRecord(traj.chunks, traj.chunks, np.zeros(len(traj.chunks)), np.zeros(len(traj.chunks)))
    al = H.goal_alignment(traj, rec, tr, nv)
    assert al.steps and np.all(al.angle_on > 90)
    assert al.off_closer_fraction == 0.0


# -- persistence --------------------------------------------------------------

def test_policy_checkpoint_round_trip(pre, cfg, run, tmp_path):
    pol = H.get_posttrained(cfg, pre, "delock", get_task("T-A"), 0, run)
    d1 = save_policy(tmp_path / "p.ckpt", pol)
    back, meta = load_policy(tmp_path / "p.ckpt")
    assert meta["mode"] == "delock"
    assert set(back.backbone.adapters) == set(pol.backbone.adapters)
    for a, b in zip(pol.blocks(), back.blocks()):
        assert a.name == b.name and np.array_equal(a.values, b.values) and a.trainable == b.trainable
    assert all(np.array_equal(pol.encoder_pre[k].values, back.encoder_pre[k].values) for k in pol.encoder_pre)
    obs = H.sample_observations(3)[0]
    g = GuidanceConfig(pos_prompt=P("put", "red"), neg_prompt=P("put", "green"))
    assert np.array_equal(denoise(pol, obs, g, noise_seed=[1, 1]), denoise(back, obs, g, noise_seed=[1, 1]))
    assert save_policy(tmp_path / "q.ckpt", back) == d1


def test_trajectory_round_trip(pre, tmp_path):
    traj = _traj(pre)
    save_trajectory(tmp_path / "t.traj", traj, {"method": "x"})
    back, meta = load_trajectory(tmp_path / "t.traj")
    assert meta["method"] == "x" and back.prompt == traj.prompt and back.noise_seeds == traj.noise_seeds
    assert back.final.digest() == traj.final.digest()
    assert all(np.array_equal(a, b) for a, b in zip(back.observations, traj.observations))
    write_columns(tmp_path / "t.tsv", ["chunk", "step", "x", "y", "dx", "dy", "grip", "held"], trajectory_rows(traj),
                  "config_digest=abc")
    header, arr = read_columns(tmp_path / "t.tsv")
    assert header[0] == "chunk" and arr.shape == (traj.steps, 8)
    assert (tmp_path / "t.tsv").read_text().startswith("# config_digest=abc")


def test_rerun_overwrites_bit_identically(tmp_path):
    c = H.smoke_config(tasks=("T-B",), methods=("no_vis_reg",), conditions=("trained",))
    digests = []
    for sub in ("a", "b"):
        r = RunDir(tmp_path / sub)
        H.run_matrix(replace(c, out_dir=str(r.root)), r)
        digests.append({k: v["sha256"] for k, v in r.manifest()["artifacts"].items()})
    assert digests[0] == digests[1]
    assert "ckpts/pretrained.ckpt" in digests[0] and "reports/matrix.json" in digests[0]
