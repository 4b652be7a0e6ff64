"""Factored flow-matching policy: encoder(obs) -> backbone(prompt, features) -> expert(chunk, t).

The encoder never sees the prompt; the prompt enters only through rows of the
embedding table consumed by the backbone.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError, ValidationError
from .nn_core import Mlp, MlpSpec, ParamBlock, param_l2_sq
from .vocab import VOCAB_SIZE, Prompt
from .world import ACTION_DIM, HORIZON, MAX_DELTA, OBS_DIM, Observation

# Chunks are regressed in normalized units so translation and gripper channels
# have comparable scale.
ACTION_SCALE = np.array([MAX_DELTA, MAX_DELTA, 1.0])


def normalize_chunk(chunk: np.ndarray) -> np.ndarray:
    return np.asarray(chunk) / ACTION_SCALE


def denormalize_chunk(chunk: np.ndarray) -> np.ndarray:
    return np.asarray(chunk) * ACTION_SCALE


@dataclass(frozen=True)
class PolicyConfig:
    encoder_hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    backbone_hidden: tuple[int, ...] = (128, 128)
    backbone_out: int = 64
    expert_hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = 16
    activation: str = "tanh"
    horizon: int = HORIZON
    time_features: int = 0
    parameterization: str = "velocity"
    t_floor: float = 0.05

    @property
    def chunk_dim(self) -> int:
        return self.horizon * ACTION_DIM


class Policy:
    """Parameter container plus the forward/backward plumbing of the factored policy.

    Treat instances as immutable snapshots once training is done; ``clone``
    before mutating.
    """

    def __init__(self, config: PolicyConfig = PolicyConfig(), seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.encoder = Mlp(MlpSpec((OBS_DIM, *c.encoder_hidden, c.feature_dim), c.activation), "enc", rng)
        self.embed = ParamBlock("emb.table", (VOCAB_SIZE, c.embed_dim), rng.normal(0.0, 1.0, VOCAB_SIZE * c.embed_dim))
        self.backbone = Mlp(MlpSpec((3 * c.embed_dim + c.feature_dim, *c.backbone_hidden, c.backbone_out),
                                    c.activation), "bb", rng)
        self.expert = Mlp(MlpSpec((c.backbone_out + c.chunk_dim + 1 + 2 * c.time_features, *c.expert_hidden, c.chunk_dim),
                                  c.activation), "ex", rng)
        self.encoder_pre: dict[str, ParamBlock] | None = None
        self.mode = "init"
        self.eval_count = 0

    # -- parameter views --------------------------------------------------
    def encoder_blocks(self) -> list[ParamBlock]:
        return list(self.encoder.params.values())

    def backbone_blocks(self) -> list[ParamBlock]:
        return [self.embed] + self.backbone.blocks()

    def expert_blocks(self) -> list[ParamBlock]:
        return self.expert.blocks()

    def blocks(self) -> list[ParamBlock]:
        return self.encoder_blocks() + self.backbone_blocks() + self.expert_blocks()

    def trainable_blocks(self) -> list[ParamBlock]:
        return [b for b in self.blocks() if b.trainable]

    def zero_grads(self) -> None:
        for b in self.blocks():
            b.zero_grad()

    def freeze_encoder_reference(self) -> None:
        """Store the current encoder as the frozen pretrained reference."""
        self.encoder_pre = {b.name: ParamBlock(b.name, b.shape, b.values.copy(), trainable=False)
                            for b in self.encoder_blocks()}

    def clone(self) -> "Policy":
        other = copy.deepcopy(self)
        for m in (other.encoder, other.backbone, other.expert):
            m.clear_tape()
        other.eval_count = 0
        return other

    def encoder_drift(self) -> float:
        if self.encoder_pre is None:
            raise StateError("policy carries no pretrained encoder reference")
        return param_l2_sq(self.encoder.params, self.encoder_pre)

    # -- forward ------------------------------------------------------------
    def encode(self, obs: np.ndarray, record: bool = False) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if obs.shape[1] != OBS_DIM:
            raise ValidationError(f"observation width {obs.shape[1]} != {OBS_DIM}")
        return self.encoder(obs, record)

    def condition(self, tokens: np.ndarray, feats: np.ndarray, record: bool = False) -> np.ndarray:
        tokens = np.atleast_2d(tokens)
        if tokens.min() < 0 or tokens.max() >= VOCAB_SIZE:
            raise ValidationError("token id outside vocabulary")
        emb = self.embed.mat[tokens].reshape(len(tokens), -1)
        if record:
            self._tokens = tokens
        return self.backbone(np.concatenate([emb, feats], axis=1), record)

    def head(self, cond: np.ndarray, chunk_flat: np.ndarray, t: np.ndarray, record: bool = False) -> np.ndarray:
        self.eval_count += len(cond)
        c = self.config
        tf = [t[:, None]]
        if c.time_features:
            k = np.arange(1, c.time_features + 1)[None, :] * np.pi
            tf += [np.sin(k * t[:, None]), np.cos(k * t[:, None])]
        out = self.expert(np.concatenate([cond, chunk_flat] + tf, axis=1), record)
        if c.parameterization == "sample":
            denom = np.maximum(t, c.t_floor)[:, None]
            if record:
                self._denom = denom
            return (chunk_flat - out) / denom
        return out

    def velocity(self, obs: np.ndarray, tokens: np.ndarray, chunk: np.ndarray, t, record: bool = False) -> np.ndarray:
        """Batched velocity in normalized action units; ``chunk`` is (B, H, d)."""
        chunk = np.asarray(chunk, dtype=float)
        b = chunk.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (b,)).copy()
        if np.any(t < 0) or np.any(t > 1):
            raise ValidationError("flow time must lie in [0, 1]")
        feats = self.encode(obs, record)
        cond = self.condition(tokens, feats, record)
        if cond.shape[0] != b:
            cond = np.broadcast_to(cond, (b, cond.shape[1]))
        out = self.head(cond, chunk.reshape(b, -1), t, record)
        return out.reshape(chunk.shape)

    def backward(self, grad_v: np.ndarray) -> None:
        """Backpropagate d<grad_v, velocity> through the last recorded ``velocity`` call."""
        c = self.config
        g_out = grad_v.reshape(len(grad_v), -1)
        if c.parameterization == "sample":
            g_out = -g_out / self._denom
        g_in = self.expert.backward(g_out)
        g_cond = g_in[:, :c.backbone_out]
        g_bb = self.backbone.backward(g_cond)
        g_emb, g_feat = g_bb[:, :3 * c.embed_dim], g_bb[:, 3 * c.embed_dim:]
        if self.embed.trainable:
            np.add.at(self.embed.gmat, self._tokens.ravel(), g_emb.reshape(-1, c.embed_dim))
        if any(b.trainable for b in self.encoder_blocks()):
            self.encoder.backward(g_feat)


# -- operation-level API --------------------------------------------------------

def _obs_array(o) -> np.ndarray:
    if isinstance(o, Observation):
        o.validate()
        return o.vector()
    return np.asarray(o, dtype=float)


def encode_obs(policy: Policy, o) -> np.ndarray:
    feats = policy.encode(_obs_array(o))
    return feats[0] if np.ndim(_obs_array(o)) == 1 else feats


def predict_velocity(policy: Policy, o, prompt: Prompt, chunk: np.ndarray, t: float) -> np.ndarray:
    """Velocity field for one observation and a normalized (H, d) chunk."""
    chunk = np.asarray(chunk, dtype=float)
    if chunk.shape != (policy.config.horizon, ACTION_DIM):
        raise ShapeError(f"chunk shape {chunk.shape} != {(policy.config.horizon, ACTION_DIM)}")
    v = policy.velocity(_obs_array(o)[None], np.array([prompt.token_ids()]), chunk[None], t)
    return v[0]


def flow_interpolate(a: np.ndarray, eps: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear path a_t = t*eps + (1-t)*a with constant target velocity eps - a.

    ``t`` is a scalar or one value per leading batch entry.
    """
    a, eps = np.asarray(a, dtype=float), np.asarray(eps, dtype=float)
    if a.shape != eps.shape:
        raise ShapeError(f"action shape {a.shape} != noise shape {eps.shape}")
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (a.ndim - 1))
    return t * eps + (1.0 - t) * a, eps - a


@dataclass
class Batch:
    obs: np.ndarray      # (B, OBS_DIM)
    chunks: np.ndarray   # (B, H, d) normalized actions
    tokens: np.ndarray   # (B, 3)

    def __post_init__(self):
        if len(self.obs) == 0:
            raise ValidationError("empty batch")


def flow_matching_loss(policy: Policy, batch: Batch, rng: np.random.Generator | None = None,
                       t: np.ndarray | None = None, eps: np.ndarray | None = None,
                       backward: bool = True) -> float:
    """Mean squared velocity error; accumulates gradients unless ``backward`` is False."""
    n = len(batch.obs)
    if t is None:
        t = rng.uniform(0.0, 1.0, n)
    if eps is None:
        eps = rng.standard_normal(batch.chunks.shape)
    a_t, u = flow_interpolate(batch.chunks, eps, t)
    v = policy.velocity(batch.obs, batch.tokens, a_t, t, record=backward)
    diff = v - u
    loss = float(np.sum(diff * diff) / n)
    if backward:
        policy.backward(2.0 * diff / n)
    return loss
