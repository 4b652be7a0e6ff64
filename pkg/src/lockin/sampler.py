"""Euler denoising of action chunks, with optional contrastive prompt guidance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .policy import Policy, denormalize_chunk
from .vocab import Prompt
from .world import ACTION_DIM, HORIZON, TaskSpec, WorldState, execute, obs_vector, success

Field = Callable[[np.ndarray, float], np.ndarray]


class FieldSource(Protocol):
    def conditioned_field(self, obs: np.ndarray, prompt: Prompt) -> Field: ...


def policy_field(policy: Policy, obs: np.ndarray, prompt: Prompt) -> Field:
    """Velocity as a function of (chunk, t) with the observation/prompt context cached."""
    obs = np.asarray(obs, dtype=float)[None]
    cond = policy.condition(np.array([prompt.token_ids()]), policy.encode(obs))
    shape = (policy.config.horizon, ACTION_DIM)

    def f(a: np.ndarray, t: float) -> np.ndarray:
        return policy.head(cond, a.reshape(1, -1), np.array([t])).reshape(shape)

    return f


def _field(source, obs, prompt) -> Field:
    if isinstance(source, Policy):
        return policy_field(source, obs, prompt)
    return source.conditioned_field(obs, prompt)


@dataclass
class GuidanceConfig:
    w: float = 3.0
    num_steps: int = 10
    cpg_enabled: bool = True
    pos_prompt: Prompt | None = None
    neg_prompt: Prompt | None = None

    def __post_init__(self):
        if self.num_steps <= 0:
            raise ConfigError("num_steps must be positive")
        if self.w < 0:
            raise ConfigError("guidance scale must be non-negative")

    @property
    def delta(self) -> float:
        return -1.0 / self.num_steps

    def times(self) -> np.ndarray:
        """Flow times visited by the Euler loop: 1, 1+delta, ..., -delta."""
        return 1.0 - np.arange(self.num_steps) / self.num_steps

    def with_prompts(self, pos: Prompt, neg: Prompt | None) -> "GuidanceConfig":
        return GuidanceConfig(self.w, self.num_steps, self.cpg_enabled, pos, neg if neg is not None else pos)


def guided_field(v_pos: np.ndarray, v_neg: np.ndarray, w: float) -> np.ndarray:
    """v_neg + w * (v_pos - v_neg); exact at w=0, w=1 and when the fields coincide."""
    v_pos, v_neg = np.asarray(v_pos, dtype=float), np.asarray(v_neg, dtype=float)
    if v_pos.shape != v_neg.shape:
        raise ShapeError(f"field shapes differ: {v_pos.shape} vs {v_neg.shape}")
    if w == 1:
        return v_pos.copy()
    return v_neg + w * (v_pos - v_neg)


def noise_chunk(noise_seed, horizon: int = HORIZON) -> np.ndarray:
    return np.random.default_rng(noise_seed).standard_normal((horizon, ACTION_DIM))


@dataclass
class DenoiseTrace:
    times: list[float] = field(default_factory=list)
    v_pos: list[np.ndarray] = field(default_factory=list)
    v_neg: list[np.ndarray] = field(default_factory=list)


def euler_integrate(a1: np.ndarray, f_pos: Field, config: GuidanceConfig, f_neg: Field | None = None,
                    trace: DenoiseTrace | None = None) -> np.ndarray:
    """Integrate from t=1 to t=0 with step delta; guided when ``f_neg`` is given."""
    a = np.array(a1, dtype=float)
    delta = config.delta
    for t in config.times():
        v_pos = f_pos(a, t)
        if f_neg is not None:
            v_neg = f_neg(a, t)
            v = guided_field(v_pos, v_neg, config.w)
        else:
            v_neg, v = None, v_pos
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at t={t:.4f}")
        if trace is not None:
            trace.times.append(float(t))
            trace.v_pos.append(v_pos)
            if v_neg is not None:
                trace.v_neg.append(v_neg)
        a = a + delta * v
    return a


def denoise(source, obs, config: GuidanceConfig, noise_seed=None, noise: np.ndarray | None = None,
            trace: DenoiseTrace | None = None) -> np.ndarray:
    """Sample one normalized action chunk for ``obs`` under ``config``.

    With CPG enabled each Euler step evaluates the positive and the negative
    prompt field once; otherwise only the positive prompt is used.
    """
    if config.pos_prompt is None:
        raise ConfigError("guidance config has no positive prompt")
    a1 = noise if noise is not None else noise_chunk(noise_seed)
    f_pos = _field(source, obs, config.pos_prompt)
    f_neg = None
    if config.cpg_enabled:
        neg = config.neg_prompt if config.neg_prompt is not None else config.pos_prompt
        f_neg = _field(source, obs, neg)
    return euler_integrate(a1, f_pos, config, f_neg, trace)


# -- rollouts -----------------------------------------------------------------

@dataclass
class Trajectory:
    seed: int
    prompt: Prompt
    initial: WorldState
    observations: list[np.ndarray] = field(default_factory=list)
    noise_seeds: list[list[int]] = field(default_factory=list)
    chunks: list[np.ndarray] = field(default_factory=list)        # executed (de-normalized) actions
    traces: list[DenoiseTrace] = field(default_factory=list)
    final: WorldState | None = None
    success: bool = False

    @property
    def steps(self) -> int:
        return sum(len(c) for c in self.chunks)


Actor = Callable[[WorldState, np.ndarray, list[int]], np.ndarray]


def policy_actor(source, config: GuidanceConfig, keep_traces: bool = False):
    def act(state, obs, seed, traces=None):
        tr = DenoiseTrace() if keep_traces else None
        a = denoise(source, obs, config, noise_seed=seed, trace=tr)
        if traces is not None and tr is not None:
            traces.append(tr)
        return denormalize_chunk(a)
    return act


def rollout(actor, initial: WorldState, prompt: Prompt, seed: int, max_steps: int,
            keep_traces: bool = False) -> Trajectory:
    """Observe, produce one chunk, execute it open-loop, repeat until success or ``max_steps``."""
    traj = Trajectory(seed, prompt, initial)
    state = initial
    k = 0
    while state.steps - initial.steps < max_steps:
        obs = obs_vector(state)
        nseed = [int(seed), k]
        try:
            chunk = actor(state, obs, nseed, traj.traces) if keep_traces else actor(state, obs, nseed)
        except Exception as e:
            raise RuntimeError(f"actor failed at rollout step {k}: {e}") from e
        remaining = max_steps - (state.steps - initial.steps)
        chunk = np.asarray(chunk)[:remaining]
        traj.observations.append(obs)
        traj.noise_seeds.append(nseed)
        traj.chunks.append(chunk)
        state = execute(state, chunk)
        k += 1
        if success(state, prompt):
            traj.success = True
            break
    traj.final = state
    return traj


def rollout_policy(source, task: TaskSpec, config: GuidanceConfig, seed: int, max_steps: int | None = None,
                   region: str = "id", keep_traces: bool = False) -> Trajectory:
    """Seeded rollout; ``config.pos_prompt`` is both the instruction and the success criterion."""
    rng = np.random.default_rng([seed, 7])
    initial = task.sample_layout(rng, region)
    steps = task.max_steps if max_steps is None else max_steps
    return rollout(policy_actor(source, config, keep_traces), initial, config.pos_prompt, seed, steps, keep_traces)


def expert_actor(prompt: Prompt, sigma: float = 0.0):
    from .world import scripted_expert

    def act(state, obs, seed, traces=None):
        return scripted_expert(state, prompt, np.random.default_rng(seed), sigma)
    return act
