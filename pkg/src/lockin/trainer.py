"""Pretraining, drift-regularized low-data post-training, and weight interpolation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError
from .nn_core import LrSchedule, OptimState, adamw_step, param_l2_sq
from .policy import Batch, Policy, PolicyConfig, flow_matching_loss, normalize_chunk
from .world import DemoSet

log = logging.getLogger(__name__)

MODES = ("delock", "no_vis_reg", "frozen_vis", "full_ft")


@dataclass
class TrainConfig:
    mode: str = "delock"
    lam: float = 1e-1
    steps: int = 3000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 300
    decay_steps: int = 15_000
    final_lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    backbone_adapter: bool = True
    expert_adapter: bool = True
    backbone_rank: int = 8
    expert_rank: int = 16
    seed: int = 0
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "delock" and not self.lam > 0:
            raise ConfigError("mode 'delock' requires lam > 0")
        if self.mode in ("no_vis_reg", "full_ft") and self.lam != 0:
            raise ConfigError(f"mode {self.mode!r} requires lam == 0")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        return self

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_steps, self.decay_steps, self.final_lr)

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_config(**overrides) -> TrainConfig:
    base = TrainConfig(mode="full_ft", lam=0.0, steps=20_000, batch_size=64, peak_lr=1e-3, warmup_steps=500,
                       decay_steps=20_000, final_lr=1e-5)
    return replace(base, **overrides)


@dataclass
class LogRow:
    step: int
    loss: float
    bc_loss: float
    penalty: float
    drift_norm: float


def drift_penalty(policy: Policy, lam: float, accumulate: bool = True) -> float:
    """lam * ||theta_v - theta_v_pre||^2; adds 2*lam*(theta_v - theta_v_pre) to encoder grads."""
    if policy.encoder_pre is None:
        raise StateError("drift penalty needs the pretrained encoder reference")
    if lam == 0:
        return 0.0
    total = 0.0
    for b in policy.encoder_blocks():
        d = b.values - policy.encoder_pre[b.name].values
        total += float(d @ d)
        if accumulate and b.trainable:
            b.grad += 2.0 * lam * d
    return lam * total


def _dataset_arrays(ds: DemoSet):
    obs, acts, toks = ds.arrays()
    return obs, normalize_chunk(acts), toks


def _fit(policy: Policy, cfg: TrainConfig, ds: DemoSet, lam: float,
         callback: Callable[[int, Policy], None] | None = None) -> list[LogRow]:
    obs, acts, toks = _dataset_arrays(ds)
    n = len(obs)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = OptimState(schedule=cfg.schedule(), clip_norm=cfg.clip_norm, weight_decay=cfg.weight_decay)
    blocks = policy.trainable_blocks()
    rows = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch_size)
        policy.zero_grads()
        bc = flow_matching_loss(policy, Batch(obs[idx], acts[idx], toks[idx]), rng)
        if not math.isfinite(bc):
            raise NumericError(f"non-finite loss at step {step}")
        pen = drift_penalty(policy, lam) if policy.encoder_pre is not None else 0.0
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            # logged values all refer to the parameters the loss was evaluated at
            drift = policy.encoder_drift() if policy.encoder_pre is not None else 0.0
            rows.append(LogRow(step, bc + pen, bc, pen, math.sqrt(drift)))
        adamw_step(opt, blocks)
        if callback is not None:
            callback(step, policy)
    for m in (policy.encoder, policy.backbone, policy.expert):
        m.clear_tape()
    return rows


def pretrain(cfg: TrainConfig, data: DemoSet, policy_config: PolicyConfig = PolicyConfig(),
             log_rows: list | None = None) -> Policy:
    """Train every block on the broad corpus; the final encoder becomes the frozen reference."""
    policy = Policy(policy_config, seed=cfg.seed)
    rows = _fit(policy, cfg, data, 0.0)
    if log_rows is not None:
        log_rows.extend(rows)
    policy.freeze_encoder_reference()
    policy.mode = "pretrained"
    return policy


def prepare_posttrain(cfg: TrainConfig, pretrained: Policy) -> Policy:
    """Clone and set trainability/adapters for the requested mode."""
    cfg.validate()
    if pretrained.encoder_pre is None:
        raise StateError("post-training needs a pretrained policy with an encoder reference")
    p = pretrained.clone()
    rng = np.random.default_rng([cfg.seed, 2])
    if cfg.mode == "full_ft":
        for b in p.blocks():
            b.trainable = True
    else:
        for b in p.backbone_blocks() + p.expert_blocks():
            b.trainable = False
        if cfg.backbone_adapter:
            p.backbone.add_adapters(cfg.backbone_rank, float(cfg.backbone_rank), rng)
        if cfg.expert_adapter:
            p.expert.add_adapters(cfg.expert_rank, float(cfg.expert_rank), rng)
        for b in p.encoder_blocks():
            b.trainable = cfg.mode != "frozen_vis"
    p.mode = cfg.mode
    return p


def posttrain(cfg: TrainConfig, pretrained: Policy, data: DemoSet, log_rows: list | None = None,
              callback=None) -> Policy:
    p = prepare_posttrain(cfg, pretrained)
    lam = cfg.lam if cfg.mode == "delock" else 0.0
    rows = _fit(p, cfg, data, lam, callback)
    if log_rows is not None:
        log_rows.extend(rows)
    return p


def retain_interpolate(ft: Policy, pre: Policy, alpha: float) -> Policy:
    """Per-scalar alpha * ft + (1 - alpha) * pre, returned as a new policy."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    fb, pb = {b.name: b for b in ft.blocks()}, {b.name: b for b in pre.blocks()}
    if fb.keys() != pb.keys():
        raise ShapeError(f"structure mismatch: {sorted(fb.keys() ^ pb.keys())}")
    out = pre.clone()
    for b in out.blocks():
        f = fb[b.name]
        if f.shape != b.shape:
            raise ShapeError(f"{b.name}: {f.shape} vs {b.shape}")
        if alpha == 1.0:
            b.values[:] = f.values
        elif alpha != 0.0:
            b.values[:] = alpha * f.values + (1.0 - alpha) * pb[b.name].values
    out.mode = f"retain({alpha:g})"
    return out


def encoder_drift_sq(policy: Policy) -> float:
    return param_l2_sq(policy.encoder.params, policy.encoder_pre)
