import numpy as np
import pytest

from lockin.errors import ConfigError, ShapeError, StateError
from lockin.policy import Policy, PolicyConfig
from lockin.trainer import (TrainConfig, drift_penalty, encoder_drift_sq, posttrain, pretrain,
                            pretrain_config, retain_interpolate)
from lockin.world import gen_demoset, get_task, make_tasks

SMALL = PolicyConfig(encoder_hidden=(16,), feature_dim=8, backbone_hidden=(16,), backbone_out=8,
                     expert_hidden=(16,), embed_dim=4)


@pytest.fixture(scope="module")
def broad():
    return gen_demoset(make_tasks(), "broad", 60, seed=0)


@pytest.fixture(scope="module")
def narrow():
    return gen_demoset(get_task("T-A"), "narrow", 10, seed=1)


@pytest.fixture(scope="module")
def pretrained(broad):
    return pretrain(pretrain_config(steps=60, warmup_steps=10, decay_steps=60, batch_size=16), broad, SMALL)


def short(mode, lam=0.0, **kw):
    kw.setdefault("steps", 40)
    return TrainConfig(mode=mode, lam=lam, batch_size=8, warmup_steps=5, backbone_rank=2, expert_rank=4, **kw)


# -- config -------------------------------------------------------------------

@pytest.mark.parametrize("mode,lam", [("delock", 0.0), ("no_vis_reg", 0.1), ("full_ft", 1.0), ("bogus", 0.0),
                                      ("frozen_vis", -1.0)])
def test_inconsistent_configs_rejected(mode, lam):
    with pytest.raises(ConfigError):
        TrainConfig(mode=mode, lam=lam).validate()


def test_default_post_training_schedule_is_flat_after_warmup():
    s = TrainConfig().schedule()
    assert s(0) == 0.0
    assert s(300) == pytest.approx(1e-3)
    assert all(s(k) == pytest.approx(1e-3) for k in range(300, 3000, 250))


# -- drift penalty ------------------------------------------------------------

def _scalar_policy(value, ref):
    p = Policy(SMALL, seed=0)
    p.freeze_encoder_reference()
    first = p.encoder_blocks()[0]
    first.values[0] = value
    p.encoder_pre[first.name].values[0] = ref
    return p, first


def test_penalty_scalar_case():
    p, blk = _scalar_policy(3.0, 1.0)
    p.zero_grads()
    assert drift_penalty(p, 0.5) == 2.0
    assert blk.grad[0] == 2.0
    assert not blk.grad[1:].any()
    assert all(not b.grad.any() for b in p.backbone_blocks() + p.expert_blocks())


def test_penalty_zero_cases():
    p, blk = _scalar_policy(3.0, 3.0)
    p.zero_grads()
    assert drift_penalty(p, 0.5) == 0.0
    assert not blk.grad.any()
    p, _ = _scalar_policy(3.0, 1.0)
    assert drift_penalty(p, 0.0) == 0.0


def test_penalty_needs_reference():
    with pytest.raises(StateError):
        drift_penalty(Policy(SMALL), 1.0)


# -- pretraining --------------------------------------------------------------

def test_pretrain_loss_decreases_and_freezes_reference(broad):
    rows = []
    pol = pretrain(pretrain_config(steps=150, warmup_steps=10, decay_steps=150, batch_size=16, log_every=10),
                   broad, SMALL, log_rows=rows)
    first, last = np.mean([r.bc_loss for r in rows[:2]]), np.mean([r.bc_loss for r in rows[-2:]])
    assert last < first
    assert pol.encoder_drift() == 0.0
    assert pol.mode == "pretrained"


def test_pretrain_is_bit_reproducible(broad, tmp_path):
    cfg = pretrain_config(steps=25, warmup_steps=5, decay_steps=25, batch_size=8)
    a, b = pretrain(cfg, broad, SMALL), pretrain(cfg, broad, SMALL)
    for x, y in zip(a.blocks(), b.blocks()):
        assert np.array_equal(x.values, y.values)


# -- post-training modes ------------------------------------------------------

def _enc(p):
    return {b.name: b.values.copy() for b in p.encoder_blocks()}


def test_frozen_vis_keeps_encoder_bitwise(pretrained, narrow):
    out = posttrain(short("frozen_vis"), pretrained, narrow)
    for name, v in _enc(pretrained).items():
        assert np.array_equal(out.encoder.params[name].values, v)
    assert encoder_drift_sq(out) == 0.0


@pytest.mark.parametrize("mode,lam", [("delock", 0.1), ("no_vis_reg", 0.0), ("frozen_vis", 0.0)])
def test_adapter_modes_leave_base_weights_bitwise(pretrained, narrow, mode, lam):
    out = posttrain(short(mode, lam), pretrained, narrow)
    for b in pretrained.backbone_blocks() + pretrained.expert_blocks():
        other = {x.name: x for x in out.backbone_blocks() + out.expert_blocks()}[b.name]
        assert np.array_equal(other.values, b.values), b.name
    assert out.backbone.adapters and out.expert.adapters
    assert any(ad.B.values.any() for ad in out.expert.adapters.values())
    # the pretrained reference is carried over untouched
    for name, v in _enc(pretrained).items():
        assert np.array_equal(out.encoder_pre[name].values, v)
        assert np.array_equal(pretrained.encoder_pre[name].values, v)


def test_full_ft_trains_everything_without_adapters(pretrained, narrow):
    out = posttrain(short("full_ft"), pretrained, narrow)
    assert not out.backbone.adapters and not out.expert.adapters
    changed = [not np.array_equal(a.values, b.values) for a, b in zip(out.blocks(), pretrained.blocks())]
    assert all(changed)


def test_posttrain_requires_pretrained_reference(narrow):
    with pytest.raises(StateError):
        posttrain(short("no_vis_reg"), Policy(SMALL), narrow)


def test_posttrain_is_deterministic(pretrained, narrow, tmp_path):
    from lockin.nn_core import save_blocks
    a = posttrain(short("delock", 0.1, seed=3), pretrained, narrow)
    b = posttrain(short("delock", 0.1, seed=3), pretrained, narrow)
    da = save_blocks(tmp_path / "a.bin", a.blocks(), {"mode": a.mode})
    db = save_blocks(tmp_path / "b.bin", b.blocks(), {"mode": b.mode})
    assert da == db
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    c = posttrain(short("delock", 0.1, seed=4), pretrained, narrow)
    assert save_blocks(tmp_path / "c.bin", c.blocks(), {"mode": c.mode}) != da


def test_log_rows_track_penalty(pretrained, narrow):
    rows = []
    posttrain(short("delock", 0.5, log_every=10), pretrained, narrow, log_rows=rows)
    assert [r.step for r in rows] == [0, 10, 20, 30, 39]
    assert rows[0].drift_norm == 0.0
    assert rows[-1].penalty == pytest.approx(0.5 * rows[-1].drift_norm ** 2)
    assert all(r.loss == pytest.approx(r.bc_loss + r.penalty) for r in rows)


# -- interpolation baseline ---------------------------------------------------

def test_retain_endpoints_are_bitwise(pretrained, narrow):
    ft = posttrain(short("full_ft"), pretrained, narrow)
    one, zero = retain_interpolate(ft, pretrained, 1.0), retain_interpolate(ft, pretrained, 0.0)
    for a, b, c, d in zip(one.blocks(), ft.blocks(), zero.blocks(), pretrained.blocks()):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(c.values, d.values)


def test_retain_scalar_arithmetic(pretrained):
    ft, pre = pretrained.clone(), pretrained.clone()
    for b in ft.blocks():
        b.values[:] = 4.0
    for b in pre.blocks():
        b.values[:] = 2.0
    mixed = retain_interpolate(ft, pre, 0.25)
    assert all(np.all(b.values == 2.5) for b in mixed.blocks())


def test_retain_structure_mismatch(pretrained, narrow):
    adapted = posttrain(short("no_vis_reg"), pretrained, narrow)
    with pytest.raises(ShapeError):
        retain_interpolate(adapted, pretrained, 0.5)
    with pytest.raises(ShapeError):
        retain_interpolate(Policy(PolicyConfig(), seed=0), pretrained, 0.5)
    with pytest.raises(ValueError):
        retain_interpolate(pretrained, pretrained, 1.5)
