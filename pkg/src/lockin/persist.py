"""Policy checkpoints, stored trajectories, columnar trace dumps and the run directory."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import store
from .errors import StateError
from .nn_core import LowRankAdapter, ParamBlock, load_blocks, save_blocks
from .policy import Policy, PolicyConfig
from .sampler import Trajectory
from .vocab import Prompt
from .world import execute, state_from_row, state_row, step

PRE = "pre."


# -- policy checkpoints -------------------------------------------------------

def policy_config_from_dict(d: dict) -> PolicyConfig:
    d = dict(d)
    for k in ("encoder_hidden", "backbone_hidden", "expert_hidden"):
        if k in d:
            d[k] = tuple(int(x) for x in d[k])
    return PolicyConfig(**d)


def save_policy(path, policy: Policy, extra: dict | None = None) -> str:
    """Write every block, the frozen encoder reference and the adapter layout; returns the sha256."""
    adapters = {m.prefix: {name: [ad.rank, ad.alpha] for name, ad in m.adapters.items()}
                for m in (policy.encoder, policy.backbone, policy.expert) if m.adapters}
    meta = {"kind": "policy", "config": asdict(policy.config), "mode": policy.mode, "adapters": adapters}
    meta.update(extra or {})
    blocks = list(policy.blocks())
    if policy.encoder_pre is not None:
        blocks += [ParamBlock(PRE + b.name, b.shape, b.values, trainable=False) for b in policy.encoder_pre.values()]
    return save_blocks(path, blocks, meta)


def load_policy(path) -> tuple[Policy, dict]:
    blocks, meta = load_blocks(path)
    if meta.get("kind") != "policy":
        raise StateError(f"{path} is not a policy checkpoint")
    policy = Policy(policy_config_from_dict(meta["config"]))
    modules = {m.prefix: m for m in (policy.encoder, policy.backbone, policy.expert)}
    for prefix, targets in meta["adapters"].items():
        for name, (rank, alpha) in targets.items():
            a, b = blocks[f"{name}.lora_A"], blocks[f"{name}.lora_B"]
            modules[prefix].adapters[name] = LowRankAdapter(name, int(rank), float(alpha), a, b)
    for blk in policy.encoder_blocks() + [policy.embed] + policy.backbone.blocks() + policy.expert.blocks():
        src = blocks[blk.name]
        blk.values[:] = src.values
        blk.trainable = src.trainable
    pre = {k[len(PRE):]: ParamBlock(k[len(PRE):], v.shape, v.values, trainable=False)
           for k, v in blocks.items() if k.startswith(PRE)}
    policy.encoder_pre = pre or None
    policy.mode = meta["mode"]
    return policy, meta


# -- trajectories ---------------------------------------------------------------

def save_trajectory(path, traj: Trajectory, meta: dict | None = None) -> str:
    """Exact record for replay: initial layout, per-chunk observations, noise seeds and executed actions."""
    lengths = np.array([len(c) for c in traj.chunks], dtype=int)
    obs = np.array(traj.observations) if traj.observations else np.zeros((0, 0))
    seeds = np.array(traj.noise_seeds, dtype=int).reshape(-1, 2)
    actions = np.concatenate(traj.chunks) if traj.chunks else np.zeros((0, 3))
    m = {"kind": "trajectory", "seed": int(traj.seed), "prompt": traj.prompt.key, "success": bool(traj.success)}
    m.update(meta or {})
    return store.write(path, {"initial": state_row(traj.initial), "observations": obs, "noise_seeds": seeds,
                              "lengths": lengths, "actions": actions}, m)


def load_trajectory(path) -> tuple[Trajectory, dict]:
    arrays, meta = store.read(path)
    if meta.get("kind") != "trajectory":
        raise StateError(f"{path} is not a trajectory file")
    traj = Trajectory(meta["seed"], Prompt.parse(meta["prompt"]), state_from_row(arrays["initial"]))
    start = 0
    for n in arrays["lengths"]:
        traj.chunks.append(arrays["actions"][start:start + int(n)])
        start += int(n)
    traj.observations = list(arrays["observations"])
    traj.noise_seeds = [[int(a), int(b)] for a, b in arrays["noise_seeds"]]
    state = traj.initial
    for c in traj.chunks:
        state = execute(state, c)
    traj.final = state
    traj.success = meta["success"]
    return traj, meta


def trajectory_states(traj: Trajectory):
    """States at the start of every recorded chunk, re-derived by executing the stored actions."""
    state, out = traj.initial, []
    for c in traj.chunks:
        out.append(state)
        state = execute(state, c)
    return out


def write_columns(path, header: list[str], rows, comment: str | None = None) -> None:
    """Tab-separated numeric table with one header line; ``comment`` goes on a leading ``#`` line."""
    lines = [f"# {comment}"] if comment else []
    lines.append("\t".join(header))
    for r in rows:
        lines.append("\t".join(repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x)) for x in r))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_columns(path) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    header = lines[0].split("\t")
    return header, np.array([[float(x) for x in ln.split("\t")] for ln in lines[1:]]).reshape(-1, len(header))


def trajectory_rows(traj: Trajectory) -> list[tuple]:
    """One row per executed action: chunk index, step in chunk, gripper position before, action, held slot."""
    rows, state = [], traj.initial
    for k, chunk in enumerate(traj.chunks):
        for j, a in enumerate(chunk):
            rows.append((k, j, state.gripper[0], state.gripper[1], a[0], a[1], a[2], state.held))
            state = step(state, a)
    return rows


TRAJECTORY_COLUMNS = ["chunk", "step", "x", "y", "dx", "dy", "grip", "held"]


# -- run directory ----------------------------------------------------------------

@dataclass
class RunDir:
    """``data/``, ``ckpts/``, ``reports/``, ``traces/`` plus ``manifest.json`` of content digests."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        for sub in ("data", "ckpts", "reports", "traces"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"artifacts": {}}

    def record(self, path: Path, config_digest: str, inputs: dict[str, str] | None = None) -> str:
        """Register an artifact (sha256 of its bytes, producing config, input digests)."""
        path = Path(path)
        sha = file_digest(path)
        man = self.manifest()
        man["artifacts"][str(path.relative_to(self.root))] = {"sha256": sha, "config_digest": config_digest,
                                                              "inputs": dict(sorted((inputs or {}).items()))}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)
        return sha

    def digest_of(self, path: Path) -> str | None:
        entry = self.manifest()["artifacts"].get(str(Path(path).relative_to(self.root)))
        return entry["sha256"] if entry else None


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
