"""Dense MLP substrate: parameter blocks, manual backprop, low-rank adapters, AdamW.

Everything is float64 and batched along the leading axis. Parameters live in
flat arrays; ``ParamBlock.mat`` gives a shaped view onto the same memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import store
from .errors import NumericError, ShapeError, StateError

DTYPE = np.float64

_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class ParamBlock:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray
    grad: np.ndarray = None  # type: ignore[assignment]
    trainable: bool = True

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE).reshape(-1)
        size = math.prod(self.shape)
        if self.values.size != size:
            raise ShapeError(f"{self.name}: {self.values.size} values for shape {self.shape}")
        if self.grad is None:
            self.grad = np.zeros(size, dtype=DTYPE)
        else:
            self.grad = np.ascontiguousarray(self.grad, dtype=DTYPE).reshape(-1)
            if self.grad.size != size:
                raise ShapeError(f"{self.name}: grad length {self.grad.size} != {size}")

    @classmethod
    def zeros(cls, name: str, shape, trainable: bool = True) -> "ParamBlock":
        return cls(name, tuple(shape), np.zeros(math.prod(shape)), trainable=trainable)

    @property
    def mat(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    @property
    def gmat(self) -> np.ndarray:
        return self.grad.reshape(self.shape)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.name, self.shape, self.values.copy(), trainable=self.trainable)


def zero_grads(blocks: Iterable[ParamBlock]) -> None:
    for b in blocks:
        b.zero_grad()


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.layer_widths):
            raise ShapeError(f"non-positive width in {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass
class LowRankAdapter:
    """Additive correction ``(alpha / rank) * B @ A`` on one weight matrix."""

    target: str
    rank: int
    alpha: float
    A: ParamBlock
    B: ParamBlock

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, target: ParamBlock, rank: int, alpha: float, rng: np.random.Generator,
             init_std: float = 0.01) -> "LowRankAdapter":
        out_dim, in_dim = target.shape
        A = ParamBlock(f"{target.name}.lora_A", (rank, in_dim), rng.normal(0.0, init_std, rank * in_dim))
        B = ParamBlock.zeros(f"{target.name}.lora_B", (out_dim, rank))
        return cls(target.name, rank, float(alpha), A, B)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.mat @ self.A.mat)


def effective_weight(w: ParamBlock, adapter: LowRankAdapter | None) -> np.ndarray:
    if adapter is None:
        return w.mat
    return w.mat + adapter.delta()


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return g * (1.0 - h * h)
    if name == "relu":
        return g * (z > 0.0)
    return g


def layer_names(prefix: str, i: int) -> tuple[str, str]:
    return f"{prefix}.w{i}", f"{prefix}.b{i}"


def forward_mlp(spec: MlpSpec, params: Mapping[str, ParamBlock], x: np.ndarray, prefix: str = "mlp",
                adapters: Mapping[str, LowRankAdapter] | None = None, tape: list | None = None) -> np.ndarray:
    """Batched forward pass. ``x`` is (batch, in) or (in,).

    When ``tape`` is a list, per-layer intermediates are appended to it for
    ``backward_mlp``.
    """
    adapters = adapters or {}
    squeeze = x.ndim == 1
    h = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    if h.shape[1] != spec.layer_widths[0]:
        raise ShapeError(f"{prefix} layer 0: input width {h.shape[1]} != {spec.layer_widths[0]}")
    for i in range(spec.n_layers):
        wn, bn = layer_names(prefix, i)
        try:
            w, b = params[wn], params[bn]
        except KeyError as e:
            raise ShapeError(f"{prefix} layer {i}: missing parameter {e.args[0]}") from None
        if w.shape != (spec.layer_widths[i + 1], spec.layer_widths[i]) or b.shape != (spec.layer_widths[i + 1],):
            raise ShapeError(f"{prefix} layer {i}: weight {w.shape} / bias {b.shape} do not match spec")
        ad = adapters.get(wn)
        z = h @ w.mat.T
        u = None
        if ad is not None:
            u = h @ ad.A.mat.T
            z = z + ad.scale * (u @ ad.B.mat.T)
        z = z + b.mat
        last = i == spec.n_layers - 1
        out = z if last else _act(spec.activation, z)
        if tape is not None:
            tape.append((h, z, out, u))
        h = out
    return h[0] if squeeze else h


def backward_mlp(spec: MlpSpec, params: Mapping[str, ParamBlock], tape: list, upstream: np.ndarray,
                 prefix: str = "mlp", adapters: Mapping[str, LowRankAdapter] | None = None) -> np.ndarray:
    """Accumulate d<upstream, output>/dparams into ``.grad``; return the input gradient."""
    if not tape:
        raise StateError(f"{prefix}: backward called without a recorded forward pass")
    adapters = adapters or {}
    g = np.atleast_2d(np.asarray(upstream, dtype=DTYPE))
    for i in reversed(range(spec.n_layers)):
        h, z, out, u = tape[i]
        if i != spec.n_layers - 1:
            g = _act_grad(spec.activation, z, out, g)
        wn, bn = layer_names(prefix, i)
        w, b = params[wn], params[bn]
        if w.trainable:
            w.grad += (g.T @ h).ravel()
        if b.trainable:
            b.grad += g.sum(axis=0)
        gx = g @ w.mat
        ad = adapters.get(wn)
        if ad is not None:
            du = ad.scale * (g @ ad.B.mat)
            if ad.B.trainable:
                ad.B.grad += ad.scale * (g.T @ u).ravel()
            if ad.A.trainable:
                ad.A.grad += (du.T @ h).ravel()
            gx = gx + du @ ad.A.mat
        g = gx
    return g


class Mlp:
    """Feed-forward network owning its ParamBlocks, optional adapters, and a tape."""

    def __init__(self, spec: MlpSpec, prefix: str, rng: np.random.Generator | None = None):
        self.spec = spec
        self.prefix = prefix
        self.params: dict[str, ParamBlock] = {}
        self.adapters: dict[str, LowRankAdapter] = {}
        self._tape: list | None = None
        for i in range(spec.n_layers):
            fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
            wn, bn = layer_names(prefix, i)
            if rng is None:
                wv = np.zeros(fan_in * fan_out)
            else:
                wv = rng.normal(0.0, 1.0 / math.sqrt(fan_in), fan_in * fan_out)
            self.params[wn] = ParamBlock(wn, (fan_out, fan_in), wv)
            self.params[bn] = ParamBlock.zeros(bn, (fan_out,))

    def __call__(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        tape = [] if record else None
        out = forward_mlp(self.spec, self.params, x, self.prefix, self.adapters, tape)
        if record:
            self._tape = tape
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._tape is None:
            raise StateError(f"{self.prefix}: backward called without a recorded forward pass")
        return backward_mlp(self.spec, self.params, self._tape, upstream, self.prefix, self.adapters)

    def clear_tape(self) -> None:
        self._tape = None

    def add_adapters(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        for i in range(self.spec.n_layers):
            wn, _ = layer_names(self.prefix, i)
            self.adapters[wn] = LowRankAdapter.init(self.params[wn], rank, alpha, rng)

    def blocks(self) -> list[ParamBlock]:
        out = list(self.params.values())
        for ad in self.adapters.values():
            out += [ad.A, ad.B]
        return out


# -- optimizer ---------------------------------------------------------------

@dataclass
class LrSchedule:
    """Linear warmup from 0, then cosine decay from ``peak`` to ``final``."""

    peak: float = 1e-3
    warmup_steps: int = 300
    decay_steps: int = 15_000
    final: float = 1e-3

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak * step / self.warmup_steps
        span = max(self.decay_steps - self.warmup_steps, 1)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.final + (self.peak - self.final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(blocks: Iterable[ParamBlock]) -> float:
    return math.sqrt(sum(float(b.grad @ b.grad) for b in blocks if b.trainable))


def adamw_step(opt: OptimState, blocks: Iterable[ParamBlock]) -> float:
    """One AdamW update in place. Returns the pre-clip global grad norm."""
    blocks = [b for b in blocks if b.trainable]
    for b in blocks:
        if not np.all(np.isfinite(b.grad)):
            raise NumericError(f"non-finite gradient in {b.name} at optimizer step {opt.step}")
    norm = global_grad_norm(blocks)
    clip = opt.clip_norm / norm if opt.clip_norm and norm > opt.clip_norm else 1.0
    lr = opt.schedule(opt.step)
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for b in blocks:
        g = b.grad * clip if clip != 1.0 else b.grad
        m = opt.m.setdefault(b.name, np.zeros_like(b.values))
        v = opt.v.setdefault(b.name, np.zeros_like(b.values))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay:
            b.values -= lr * opt.weight_decay * b.values
        b.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return norm


# -- parameter-space utilities ------------------------------------------------

def _by_name(blocks) -> dict[str, ParamBlock]:
    if isinstance(blocks, Mapping):
        return dict(blocks)
    return {b.name: b for b in blocks}


def param_l2_sq(a, b) -> float:
    """Squared L2 distance between two matching sets of blocks."""
    a, b = _by_name(a), _by_name(b)
    if a.keys() != b.keys():
        raise ShapeError(f"block names differ: {sorted(a.keys() ^ b.keys())}")
    total = 0.0
    for name in sorted(a):
        if a[name].shape != b[name].shape:
            raise ShapeError(f"{name}: shape {a[name].shape} vs {b[name].shape}")
        d = a[name].values - b[name].values
        total += float(d @ d)
    return total


def finite_diff_grad(loss_fn: Callable[[], float], blocks: Iterable[ParamBlock], h: float = 1e-5,
                     only_trainable: bool = True) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every scalar in ``blocks``.

    ``loss_fn`` takes no arguments and reads the blocks' current values.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for b in blocks:
        if only_trainable and not b.trainable:
            continue
        g = np.zeros_like(b.values)
        for i in range(b.values.size):
            orig = b.values[i]
            b.values[i] = orig + h
            lp = loss_fn()
            b.values[i] = orig - h
            lm = loss_fn()
            b.values[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        out[b.name] = g
    return out


# -- checkpoint container -----------------------------------------------------

def save_blocks(path, blocks: Iterable[ParamBlock], metadata: Mapping | None = None) -> str:
    """Write blocks and a metadata record; returns the file digest. Round-trips bit-exactly."""
    blocks = list(blocks)
    meta = dict(metadata or {})
    meta["_trainable"] = {b.name: bool(b.trainable) for b in blocks}
    meta["_shapes"] = {b.name: list(b.shape) for b in blocks}
    return store.write(path, {b.name: b.values for b in blocks}, meta)


def load_blocks(path) -> tuple[dict[str, ParamBlock], dict]:
    arrays, meta = store.read(path)
    trainable = meta.pop("_trainable")
    shapes = meta.pop("_shapes")
    blocks = {n: ParamBlock(n, tuple(shapes[n]), a, trainable=trainable[n]) for n, a in arrays.items()}
    return blocks, meta
