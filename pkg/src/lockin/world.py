"""Toy 2D manipulation world, scripted expert, paired-prompt tasks, demo datasets.

The workspace is the unit square. A gripper moves by at most ``MAX_DELTA`` per
axis per step, grasps the nearest object within ``GRASP_RADIUS`` when its
command exceeds 0.5 and releases when the command drops below -0.5.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import store
from .errors import ResolutionError, ValidationError
from .vocab import (CONCEPTS, N_OBJECT_CONCEPTS, NULL, OBJECT_CONCEPTS, SPATIAL, UNKNOWN, VERBS, ZONE_TYPES,
                    Prompt, object_concept)

log = logging.getLogger(__name__)

N_SLOTS = 3
N_ZONES = 2
HORIZON = 10
ACTION_DIM = 3
MAX_DELTA = 0.05
GRASP_RADIUS = 0.03
SUCCESS_RADIUS = 0.05
EXPERT_JITTER = 0.005
GRASP_WINDOW = 0.1              # expert closes the gripper this close to the object
BROAD_EXEC_NOISE = 0.02
NARROW_EXEC_NOISE = 0.01
GENERATOR_VERSION = 5


@dataclass(frozen=True)
class WorldState:
    obj_pos: np.ndarray        # (N_SLOTS, 2)
    obj_concept: np.ndarray    # (N_SLOTS,) object-concept index, -1 when the slot is empty
    zone_pos: np.ndarray       # (N_ZONES, 2)
    zone_type: np.ndarray      # (N_ZONES,) zone-type index, -1 when absent
    gripper: np.ndarray        # (2,)
    held: int = -1
    steps: int = 0

    @property
    def present(self) -> np.ndarray:
        return self.obj_concept >= 0

    def digest(self) -> str:
        return store.digest([self.obj_pos.round(12).tolist(), self.obj_concept.tolist(), self.zone_pos.round(12).tolist(),
                             self.gripper.round(12).tolist(), self.held, self.steps])


@dataclass(frozen=True)
class Observation:
    """What the policy sees: fixed slots, gripper, held slot, zones."""

    slot_pos: np.ndarray       # (N_SLOTS, 2), zero for absent slots
    slot_concept: np.ndarray   # (N_SLOTS, C) one-hot, zero for absent slots
    slot_present: np.ndarray   # (N_SLOTS,)
    gripper: np.ndarray
    held: int
    zone_pos: np.ndarray       # (N_ZONES, 2)
    zone_type: np.ndarray      # (N_ZONES, len(ZONE_TYPES)) one-hot

    def validate(self) -> None:
        absent = self.slot_present == 0
        if np.any(self.slot_pos[absent] != 0) or np.any(self.slot_concept[absent] != 0):
            raise ValidationError("absent slots must be all-zero")
        if self.held != -1 and not (0 <= self.held < N_SLOTS and self.slot_present[self.held]):
            raise ValidationError(f"held slot {self.held} does not index a present object")

    def vector(self) -> np.ndarray:
        present = self.slot_present[:, None]
        rel = (self.slot_pos - self.gripper) * present
        zpresent = self.zone_type.sum(axis=1, keepdims=True)
        zrel = (self.zone_pos - self.gripper) * zpresent
        held = np.zeros(N_SLOTS)
        if self.held >= 0:
            held[self.held] = 1.0
        return np.concatenate([
            np.concatenate([self.slot_pos, rel, self.slot_concept, present], axis=1).ravel(),
            self.gripper, held,
            np.concatenate([self.zone_pos, zrel, self.zone_type], axis=1).ravel(),
        ])


OBS_DIM = N_SLOTS * (4 + N_OBJECT_CONCEPTS + 1) + 2 + N_SLOTS + N_ZONES * (4 + len(ZONE_TYPES))


def observe(state: WorldState) -> Observation:
    present = state.present.astype(float)
    onehot = np.zeros((N_SLOTS, N_OBJECT_CONCEPTS))
    for i, c in enumerate(state.obj_concept):
        if c >= 0:
            onehot[i, c] = 1.0
    ztype = np.zeros((N_ZONES, len(ZONE_TYPES)))
    zpos = np.zeros((N_ZONES, 2))
    for j, z in enumerate(state.zone_type):
        if z >= 0:
            ztype[j, z] = 1.0
            zpos[j] = state.zone_pos[j]
    return Observation(state.obj_pos * present[:, None], onehot, present, state.gripper.copy(), state.held,
                       zpos, ztype)


def obs_vector(state: WorldState) -> np.ndarray:
    return observe(state).vector()


# -- dynamics -----------------------------------------------------------------

def step(state: WorldState, action) -> WorldState:
    a = np.asarray(action, dtype=float)
    delta = np.clip(a[:2], -MAX_DELTA, MAX_DELTA)
    if np.any(delta != a[:2]):
        log.debug("action %s clipped to per-step bound", a[:2])
    gripper = np.clip(state.gripper + delta, 0.0, 1.0)
    obj_pos = state.obj_pos.copy()
    held = state.held
    if held >= 0:
        obj_pos[held] = gripper
    cmd = a[2]
    if cmd > 0.5 and held < 0:
        d = np.linalg.norm(obj_pos - gripper, axis=1)
        d[~state.present] = np.inf
        k = int(np.argmin(d))
        if d[k] <= GRASP_RADIUS:
            held = k
            obj_pos[k] = gripper
    elif cmd < -0.5 and held >= 0:
        held = -1
    return replace(state, obj_pos=obj_pos, gripper=gripper, held=held, steps=state.steps + 1)


# -- prompt resolution and success --------------------------------------------

@dataclass(frozen=True)
class Target:
    source: int                  # object slot to manipulate
    dest_kind: str               # "zone", "object" or "hold"
    dest: int = -1


def _find_object(state: WorldState, prompt: Prompt) -> int:
    if prompt.concept == UNKNOWN:
        raise ResolutionError(f"prompt {prompt} uses the UNKNOWN concept")
    want = object_concept(prompt.concept)
    slots = [i for i in range(N_SLOTS) if state.obj_concept[i] >= 0 and (want < 0 or state.obj_concept[i] == want)]
    if len(slots) != 1:
        raise ResolutionError(f"prompt {prompt} matches {len(slots)} objects")
    return slots[0]


def resolve(state: WorldState, prompt: Prompt) -> Target:
    verb = VERBS[prompt.verb]
    src = _find_object(state, prompt)
    if verb == "open":
        return Target(src, "hold")
    if verb == "stack":
        others = [i for i in range(N_SLOTS) if i != src and state.obj_concept[i] >= 0]
        if len(others) != 1:
            raise ResolutionError(f"stack needs exactly one support object, found {len(others)}")
        return Target(src, "object", others[0])
    zones = [j for j in range(N_ZONES) if state.zone_type[j] >= 0]
    if prompt.spatial == UNKNOWN:
        raise ResolutionError(f"prompt {prompt} uses the UNKNOWN spatial token")
    if prompt.spatial == NULL:
        if len(zones) != 1:
            raise ResolutionError(f"prompt {prompt} is ambiguous between {len(zones)} zones")
        return Target(src, "zone", zones[0])
    if len(zones) < 2:
        raise ResolutionError(f"spatial prompt {prompt} needs two zones")
    xs = [state.zone_pos[j, 0] for j in zones]
    pick = zones[int(np.argmin(xs))] if SPATIAL[prompt.spatial] == "left" else zones[int(np.argmax(xs))]
    return Target(src, "zone", pick)


def destination(state: WorldState, target: Target) -> np.ndarray | None:
    if target.dest_kind == "zone":
        return state.zone_pos[target.dest]
    if target.dest_kind == "object":
        return state.obj_pos[target.dest]
    return None


def success(state: WorldState, prompt: Prompt) -> bool:
    """True when the prompted object (not merely any object) reached the prompted goal."""
    try:
        target = resolve(state, prompt)
    except ResolutionError:
        return False
    if target.dest_kind == "hold":
        return state.held == target.source
    if state.held == target.source or (target.dest_kind == "object" and state.held == target.dest):
        return False
    goal = destination(state, target)
    return bool(np.linalg.norm(state.obj_pos[target.source] - goal) <= SUCCESS_RADIUS)


# -- scripted expert ----------------------------------------------------------

def _toward(gripper: np.ndarray, goal: np.ndarray, speed: float) -> tuple[np.ndarray, bool]:
    d = goal - gripper
    m = float(np.max(np.abs(d)))
    if m <= speed:
        return d, True
    return d * (speed / m), False


def expert_action(state: WorldState, target: Target, speed: float = MAX_DELTA) -> np.ndarray:
    """Noise-free straight-line reach -> grasp -> transport -> release action.

    The grasp command is held over the last ``GRASP_WINDOW`` of the reach, so
    a learned chunk that arrives a step early or late still closes on the object.
    """
    if state.held == target.source:
        if target.dest_kind == "hold":
            return np.array([0.0, 0.0, 1.0])
        d, arrive = _toward(state.gripper, destination(state, target), speed)
        return np.array([d[0], d[1], -1.0 if arrive else 1.0])
    if state.held >= 0:
        return np.array([0.0, 0.0, -1.0])
    if _goal_reached(state, target):
        return np.array([0.0, 0.0, -1.0])
    d, arrive = _toward(state.gripper, state.obj_pos[target.source], speed)
    near = float(np.max(np.abs(state.obj_pos[target.source] - state.gripper))) <= GRASP_WINDOW
    return np.array([d[0], d[1], 1.0 if arrive or near else -1.0])


def _goal_reached(state: WorldState, target: Target) -> bool:
    if target.dest_kind == "hold":
        return state.held == target.source
    goal = destination(state, target)
    return state.held < 0 and bool(np.linalg.norm(state.obj_pos[target.source] - goal) <= SUCCESS_RADIUS)


def scripted_expert(state: WorldState, prompt: Prompt, rng: np.random.Generator | None = None,
                    sigma: float = EXPERT_JITTER, horizon: int = HORIZON,
                    speed: float = MAX_DELTA) -> np.ndarray:
    """Next ``horizon`` expert actions, planned against a simulated copy of the world.

    Jitter is added to the translation of each action and the plan reacts to
    it, so executing the chunk open-loop reproduces the simulated outcome.
    """
    target = resolve(state, prompt)
    chunk = np.zeros((horizon, ACTION_DIM))
    sim = state
    for k in range(horizon):
        a = expert_action(sim, target, speed)
        if sigma > 0 and rng is not None and np.any(a[:2] != 0):
            a[:2] = np.clip(a[:2] + rng.normal(0.0, sigma, 2), -MAX_DELTA, MAX_DELTA)
        chunk[k] = a
        sim = step(sim, a)
    return chunk


def execute(state: WorldState, chunk: np.ndarray) -> WorldState:
    for a in chunk:
        state = step(state, a)
    return state


# -- tasks --------------------------------------------------------------------

LayoutSampler = Callable[[np.random.Generator, str], WorldState]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    name: str
    probe: str                          # "C", "S", "C+S" or "loc-only"
    train_prompts: tuple[Prompt, ...]
    novel_prompts: tuple[Prompt, ...]
    sampler: LayoutSampler = field(repr=False, compare=False)
    shifted_region: bool = False        # whether a disjoint OOD placement region exists
    max_steps: int = 120

    def __post_init__(self):
        if set(self.train_prompts) & set(self.novel_prompts):
            raise ValidationError(f"{self.task_id}: train and novel prompts overlap")

    @property
    def all_prompts(self) -> tuple[Prompt, ...]:
        return self.train_prompts + self.novel_prompts

    def sample_layout(self, rng: np.random.Generator, region: str = "id") -> WorldState:
        if region not in ("id", "shifted"):
            raise ValueError(f"unknown layout region {region!r}")
        if region == "shifted" and not self.shifted_region:
            raise ValueError(f"{self.task_id} has no shifted region")
        return self.sampler(rng, region)


def _oc(name: str) -> int:
    return OBJECT_CONCEPTS.index(name)


def _uniform(rng, lo, hi):
    return np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])


def _separated(rng, boxes, min_sep):
    for _ in range(1000):
        pts = [_uniform(rng, lo, hi) for lo, hi in boxes]
        if all(np.linalg.norm(p - q) >= min_sep for i, p in enumerate(pts) for q in pts[i + 1:]):
            return pts
    raise RuntimeError("could not sample separated positions")


def _build(objects, zones, gripper) -> WorldState:
    """Fill slots in canonical order: objects by concept index, zones by x coordinate.

    A fixed slot order keeps the concept-to-slot lookup learnable by a small
    MLP; the concept one-hot is still what identifies an object.
    """
    obj_pos = np.zeros((N_SLOTS, 2))
    obj_c = -np.ones(N_SLOTS, dtype=int)
    for slot, (c, p) in enumerate(sorted(objects, key=lambda o: o[0])):
        obj_pos[slot], obj_c[slot] = p, c
    zone_pos = np.zeros((N_ZONES, 2))
    zone_t = -np.ones(N_ZONES, dtype=int)
    for slot, (t, p) in enumerate(sorted(zones, key=lambda z: z[1][0])):
        zone_pos[slot], zone_t[slot] = p, t
    return WorldState(obj_pos, obj_c, zone_pos, zone_t, gripper)


def _gripper_start(rng):
    return _uniform(rng, (0.3, 0.0), (0.7, 0.15))


PLATE, STOVE = ZONE_TYPES.index("plate"), ZONE_TYPES.index("stove")


def _layout_mug_concept(rng, region):
    mugs = _separated(rng, [((0.1, 0.3), (0.9, 0.6))] * 3, 0.15)
    plate = _uniform(rng, (0.35, 0.8), (0.65, 0.9))
    objs = list(zip([_oc("red"), _oc("green"), _oc("blue")], mugs))
    return _build(objs, [(PLATE, plate)], _gripper_start(rng))


def _layout_block_stack(rng, region):
    blocks = _separated(rng, [((0.15, 0.3), (0.85, 0.85))] * 2, 0.25)
    objs = list(zip([_oc("blue"), _oc("green")], blocks))
    return _build(objs, [], _gripper_start(rng))


def _layout_mug_spatial(rng, region):
    mug = _uniform(rng, (0.4, 0.25), (0.6, 0.45))
    # plates sit side by side at one height, so left/right differ only in x
    y = rng.uniform(0.65, 0.9)
    left = np.array([rng.uniform(0.1, 0.25), y])
    right = np.array([rng.uniform(0.75, 0.9), y])
    return _build([(_oc("mug"), mug)], [(PLATE, left), (PLATE, right)], _gripper_start(rng))


def _layout_labeled_door(rng, region):
    banana = _uniform(rng, (0.15, 0.6), (0.35, 0.85))
    apple = _uniform(rng, (0.65, 0.6), (0.85, 0.85))
    return _build([(_oc("banana"), banana), (_oc("apple"), apple)], [], _gripper_start(rng))


ID_POT_X = (0.1, 0.4)
SHIFTED_POT_X = (0.6, 0.9)


def _layout_pot_stove(rng, region):
    xs = ID_POT_X if region == "id" else SHIFTED_POT_X
    pot = _uniform(rng, (xs[0], 0.25), (xs[1], 0.55))
    stove = _uniform(rng, (0.4, 0.8), (0.6, 0.9))
    return _build([(_oc("pot"), pot)], [(STOVE, stove)], _gripper_start(rng))


def in_region(x: float, region: str) -> bool:
    lo, hi = ID_POT_X if region == "id" else SHIFTED_POT_X
    return lo <= x <= hi


def make_tasks() -> list[TaskSpec]:
    P = Prompt.make
    return [
        TaskSpec("T-A", "mug-on-plate", "C", (P("put", "green"),), (P("put", "red"), P("put", "blue")),
                 _layout_mug_concept),
        TaskSpec("T-B", "block-stacking", "C", (P("stack", "blue"),), (P("stack", "green"),), _layout_block_stack),
        TaskSpec("T-C", "mug-on-side-plate", "S", (P("put", "mug", "left"),), (P("put", "mug", "right"),),
                 _layout_mug_spatial),
        TaskSpec("T-D", "open-labeled-door", "C+S", (P("open", "banana"),), (P("open", "apple"),),
                 _layout_labeled_door),
        TaskSpec("T-E", "pot-on-stove", "loc-only", (P("put", "pot"),), (), _layout_pot_stove, shifted_region=True),
    ]


def get_task(task_id: str) -> TaskSpec:
    for t in make_tasks():
        if t.task_id == task_id:
            return t
    raise KeyError(f"unknown task {task_id!r}")


# -- demonstrations -----------------------------------------------------------

@dataclass
class Demo:
    prompt: Prompt
    initial: WorldState
    observations: np.ndarray   # (n_chunks, OBS_DIM)
    chunks: np.ndarray         # (n_chunks, HORIZON, ACTION_DIM) expert plans, the training labels
    executed: np.ndarray | None = None   # what was actually applied; None when execution was noise-free

    def applied(self) -> np.ndarray:
        """The action chunks that reproduce this episode when re-executed."""
        return self.chunks if self.executed is None else self.executed


@dataclass
class DemoSet:
    demos: list[Demo]
    coverage: str
    task_id: str
    seed: int
    exec_noise: float = 0.0

    @property
    def size(self) -> int:
        return len(self.demos)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flatten to (obs, chunks, token ids) training triples."""
        obs = np.concatenate([d.observations for d in self.demos])
        acts = np.concatenate([d.chunks for d in self.demos])
        toks = np.concatenate([np.tile(d.prompt.token_ids(), (len(d.chunks), 1)) for d in self.demos])
        return obs, acts, toks

    def prompts(self) -> list[Prompt]:
        return [d.prompt for d in self.demos]


def run_expert_episode(state: WorldState, prompt: Prompt, rng: np.random.Generator, max_steps: int,
                       sigma: float = EXPERT_JITTER, exec_noise: float = 0.0
                       ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray], WorldState, bool]:
    """Roll the expert out chunk by chunk.

    With ``exec_noise`` > 0 the executed translations are perturbed, so the data
    visits states off the nominal path. Returns observations, the expert's plan
    per chunk, the chunks actually executed, the final state and success.
    """
    obs, chunks, applied = [], [], []
    while state.steps < max_steps:
        chunk = scripted_expert(state, prompt, rng, sigma)
        executed = chunk
        if exec_noise > 0:
            executed = chunk.copy()
            executed[:, :2] = np.clip(executed[:, :2] + rng.normal(0.0, exec_noise, (len(chunk), 2)),
                                      -MAX_DELTA, MAX_DELTA)
        obs.append(obs_vector(state))
        chunks.append(chunk)
        applied.append(executed)
        state = execute(state, executed)
        if success(state, prompt):
            return obs, chunks, applied, state, True
    return obs, chunks, applied, state, False


def gen_demoset(task: TaskSpec | list[TaskSpec], coverage: str, n: int, seed: int,
                region: str = "id", exec_noise: float | None = None) -> DemoSet:
    """Expert demonstrations. ``broad`` cycles every prompt of the given task(s);
    ``narrow`` uses training prompts only. Failed episodes are resampled.

    ``exec_noise`` defaults to ``BROAD_EXEC_NOISE`` for broad sets and
    ``NARROW_EXEC_NOISE`` for narrow ones. Perturbed states are labelled with the
    expert's plan from that state; the executed chunks are kept alongside, so
    every demo still replays open-loop to success.
    """
    if n <= 0:
        raise ValueError("demo set size must be positive")
    tasks = task if isinstance(task, list) else [task]
    if coverage == "broad":
        pool = [(t, p) for t in tasks for p in t.all_prompts]
    elif coverage == "narrow":
        pool = [(t, p) for t in tasks for p in t.train_prompts]
    else:
        raise ValueError(f"unknown coverage {coverage!r}")
    if exec_noise is None:
        exec_noise = BROAD_EXEC_NOISE if coverage == "broad" else NARROW_EXEC_NOISE
    demos = []
    for i in range(n):
        t, p = pool[i % len(pool)]
        for attempt in range(100):
            rng = np.random.default_rng([seed, i, attempt])
            s0 = t.sample_layout(rng, region)
            obs, chunks, applied, _, ok = run_expert_episode(s0, p, rng, t.max_steps, exec_noise=exec_noise)
            if ok:
                break
            log.info("expert failed on %s episode %d attempt %d; resampling", t.task_id, i, attempt)
        demos.append(Demo(p, s0, np.array(obs), np.array(chunks), np.array(applied) if exec_noise > 0 else None))
    task_id = tasks[0].task_id if len(tasks) == 1 else "+".join(t.task_id for t in tasks)
    return DemoSet(demos, coverage, task_id, seed, exec_noise)


def demoset_manifest(ds: DemoSet) -> dict:
    return {"task_id": ds.task_id, "coverage": ds.coverage, "n": ds.size, "seed": ds.seed,
            "exec_noise": ds.exec_noise, "generator_version": GENERATOR_VERSION}


def save_demoset(path, ds: DemoSet) -> str:
    lengths = np.array([len(d.chunks) for d in ds.demos])
    prompts = np.array([[d.prompt.verb, d.prompt.concept, d.prompt.spatial] for d in ds.demos])
    init = np.array([state_row(d.initial) for d in ds.demos])
    obs = np.concatenate([d.observations for d in ds.demos])
    arrays = {"lengths": lengths, "prompts": prompts, "initial": init, "obs": obs,
              "chunks": np.concatenate([d.chunks for d in ds.demos])}
    if ds.demos and ds.demos[0].executed is not None:
        arrays["executed"] = np.concatenate([d.executed for d in ds.demos])
    return store.write(path, arrays, demoset_manifest(ds))


def state_row(state: WorldState) -> np.ndarray:
    """Flat layout record of a resting state (positions, concepts, zones, gripper)."""
    return np.concatenate([state.obj_pos.ravel(), state.obj_concept, state.zone_pos.ravel(), state.zone_type,
                           state.gripper])


def state_from_row(row: np.ndarray) -> WorldState:
    k = 0
    obj_pos = row[k:k + 2 * N_SLOTS].reshape(N_SLOTS, 2); k += 2 * N_SLOTS
    obj_c = row[k:k + N_SLOTS].astype(int); k += N_SLOTS
    zone_pos = row[k:k + 2 * N_ZONES].reshape(N_ZONES, 2); k += 2 * N_ZONES
    zone_t = row[k:k + N_ZONES].astype(int); k += N_ZONES
    return WorldState(obj_pos.copy(), obj_c, zone_pos.copy(), zone_t, row[k:k + 2].copy())


def load_demoset(path) -> DemoSet:
    arrays, man = store.read(path)
    demos, start = [], 0
    for n, p, row in zip(arrays["lengths"], arrays["prompts"], arrays["initial"]):
        n = int(n)
        executed = arrays["executed"][start:start + n] if "executed" in arrays else None
        demos.append(Demo(Prompt(*(int(x) for x in p)), state_from_row(row), arrays["obs"][start:start + n],
                          arrays["chunks"][start:start + n], executed))
        start += n
    return DemoSet(demos, man["coverage"], man["task_id"], man["seed"], man.get("exec_noise", 0.0))


def layout_table(state: WorldState) -> list[dict]:
    """Plain coordinate rows for plotting a layout."""
    rows = [{"kind": "gripper", "label": "gripper", "x": float(state.gripper[0]), "y": float(state.gripper[1])}]
    for i in range(N_SLOTS):
        if state.obj_concept[i] >= 0:
            rows.append({"kind": "object", "label": OBJECT_CONCEPTS[state.obj_concept[i]],
                         "x": float(state.obj_pos[i, 0]), "y": float(state.obj_pos[i, 1])})
    for j in range(N_ZONES):
        if state.zone_type[j] >= 0:
            rows.append({"kind": "zone", "label": ZONE_TYPES[state.zone_type[j]],
                         "x": float(state.zone_pos[j, 0]), "y": float(state.zone_pos[j, 1])})
    return rows


__all__ = ["WorldState", "Observation", "TaskSpec", "Demo", "DemoSet", "Target", "step", "observe", "obs_vector",
           "scripted_expert", "success", "resolve", "make_tasks", "get_task", "gen_demoset", "execute",
           "save_demoset", "load_demoset", "layout_table", "CONCEPTS"]
