"""Deterministic 2D tabletop manipulation environment.

A point gripper moves on the unit square, grasps objects within reach, and
drops them into a fixed basket. Dynamics are a pure function of (state,
action): replaying a recorded action sequence reproduces every state bitwise.
A scripted expert provides demonstrations; instruction templates, synonym
rephrasing, and novel-object task construction support the generalization
evaluations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataFormatError, PlacementError

MAX_STEP = 0.1            # per-axis translation bound
GRASP_DIST = 0.05         # close within this distance grabs the object
BASKET_POS = (0.8, 0.8)   # basket is part of the table, not the scene draw
BASKET_RADIUS = 0.1
RELEASE_DIST = 0.05       # expert opens once this close to the basket center
MIN_SEPARATION = 0.15     # pairwise object separation at reset
MAX_STEPS = 80

N_BASE_TYPES = 8          # object types 0..7 are trainable; ids >= 8 are novel

DATASET_VERSION = 1

# Instruction vocabulary: the lower half of the token table holds base ids,
# the upper half mirrors them as synonyms (base b <-> synonym b + vocab/2).
TOK_PICK, TOK_THE, TOK_PLACE, TOK_IN, TOK_BASKET, TOK_POUR, TOK_INTO, TOK_BOWL = range(8)
TOK_OBJECT_BASE = 10      # token 10 + t names object type t
FUNCTION_TOKENS = {TOK_THE, TOK_IN, TOK_INTO}


def object_token(type_id: int) -> int:
    return TOK_OBJECT_BASE + (type_id % N_BASE_TYPES)


def synonym_id(base_id: int, vocab_size: int) -> int:
    return base_id + vocab_size // 2


def default_synonym_table(vocab_size: int = 64) -> dict:
    """Content token -> candidate synonym ids. Function words are absent."""
    content = [TOK_PICK, TOK_PLACE, TOK_BASKET, TOK_POUR, TOK_BOWL]
    content += [TOK_OBJECT_BASE + t for t in range(N_BASE_TYPES)]
    return {b: [synonym_id(b, vocab_size)] for b in content}


@dataclass(frozen=True)
class SceneObject:
    id: int
    type_id: int
    x: float
    y: float


@dataclass(frozen=True)
class WorldState:
    gripper: tuple        # (x, y) in [0,1]^2
    grip_closed: bool
    held: int | None      # object id, tracks the gripper exactly while held
    objects: tuple        # tuple of SceneObject
    basket: tuple = (*BASKET_POS, BASKET_RADIUS)
    step_count: int = 0

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise ContractError(f"no object with id {oid}")

    def proprio(self) -> np.ndarray:
        return np.array([self.gripper[0], self.gripper[1],
                         1.0 if self.grip_closed else -1.0])


@dataclass(frozen=True)
class TaskSpec:
    kind: str             # "pick-place" or "pour"
    target_type: int
    instruction_template: tuple
    max_steps: int = MAX_STEPS
    pour_flag: bool = False


@dataclass
class TrajectoryRecord:
    task: TaskSpec
    instruction: list
    steps: list           # list of (WorldState, proprio ndarray, action ndarray)
    traj_id: int
    success: bool


def make_task(kind: str, target_type: int) -> TaskSpec:
    obj = object_token(target_type)
    if kind == "pick-place":
        template = (TOK_PICK, TOK_THE, obj, TOK_PLACE, TOK_IN, TOK_BASKET)
        return TaskSpec(kind, target_type, template)
    if kind == "pour":
        template = (TOK_POUR, TOK_THE, obj, TOK_INTO, TOK_BOWL)
        return TaskSpec(kind, target_type, template, pour_flag=True)
    raise ContractError(f"unknown task kind {kind!r}")


def reset(task: TaskSpec, seed: int, n_distractors: int = 2) -> WorldState:
    """Seeded initial state: one target object plus distractors of other types.

    Objects are rejection-sampled with pairwise separation >= 0.15 and kept
    out of the basket's neighborhood so an episode never starts solved.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7A51)))
    gripper = (float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)))
    base_pool = [t for t in range(N_BASE_TYPES) if t != task.target_type % N_BASE_TYPES]
    distractor_types = rng.choice(base_pool, size=n_distractors, replace=False)
    types = [task.target_type] + [int(t) for t in distractor_types]

    positions: list[tuple] = []
    for _ in types:
        for attempt in range(100):
            x = float(rng.uniform(0.05, 0.95))
            y = float(rng.uniform(0.05, 0.95))
            far_from_others = all(np.hypot(x - px, y - py) >= MIN_SEPARATION
                                  for px, py in positions)
            far_from_basket = np.hypot(x - BASKET_POS[0], y - BASKET_POS[1]) >= MIN_SEPARATION
            if far_from_others and far_from_basket:
                positions.append((x, y))
                break
        else:
            raise PlacementError(f"could not place object after 100 attempts (seed {seed})")

    objects = tuple(SceneObject(i, t, px, py)
                    for i, (t, (px, py)) in enumerate(zip(types, positions)))
    return WorldState(gripper=gripper, grip_closed=False, held=None, objects=objects)


def step(state: WorldState, action) -> WorldState:
    """Advance one tick. Move, then apply the grip command.

    grip > 0 closes (grabbing the nearest free object within reach on that
    tick), grip < 0 opens and releases, grip == 0 leaves the grip unchanged.
    """
    dx = float(np.clip(action[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(action[1], -MAX_STEP, MAX_STEP))
    grip = float(action[2])

    gx = float(np.clip(state.gripper[0] + dx, 0.0, 1.0))
    gy = float(np.clip(state.gripper[1] + dy, 0.0, 1.0))

    held = state.held
    objects = list(state.objects)
    if held is not None:
        i = next(i for i, o in enumerate(objects) if o.id == held)
        objects[i] = replace(objects[i], x=gx, y=gy)

    grip_closed = state.grip_closed
    if grip > 0:
        grip_closed = True
        if held is None:
            best = None
            for o in objects:
                d = np.hypot(o.x - gx, o.y - gy)
                if d <= GRASP_DIST and (best is None or (d, o.id) < best[:2]):
                    best = (d, o.id)
            if best is not None:
                held = best[1]
                i = next(i for i, o in enumerate(objects) if o.id == held)
                objects[i] = replace(objects[i], x=gx, y=gy)
    elif grip < 0:
        grip_closed = False
        held = None

    return replace(state, gripper=(gx, gy), grip_closed=grip_closed, held=held,
                   objects=tuple(objects), step_count=state.step_count + 1)


def target_object(state: WorldState, task: TaskSpec) -> SceneObject:
    for o in state.objects:
        if o.type_id == task.target_type:
            return o
    raise ContractError(f"target type {task.target_type} absent from scene")


def success_check(state: WorldState, task: TaskSpec) -> bool:
    """True iff the target object sits inside the basket and is not held."""
    obj = target_object(state, task)
    if state.held == obj.id:
        return False
    bx, by, br = state.basket
    return bool(np.hypot(obj.x - bx, obj.y - by) <= br)


def _toward(src: tuple, dst: tuple) -> tuple:
    dx, dy = dst[0] - src[0], dst[1] - src[1]
    dist = float(np.hypot(dx, dy))
    if dist < 1e-12:
        return 0.0, 0.0, 0.0
    s = min(MAX_STEP, dist)
    return dx / dist * s, dy / dist * s, dist


def scripted_expert(state: WorldState, task: TaskSpec) -> np.ndarray:
    """Phase policy: approach, grasp, carry, release. Always within bounds."""
    obj = target_object(state, task)
    if state.held == obj.id:
        mx, my, dist = _toward(state.gripper, state.basket[:2])
        if dist > RELEASE_DIST:
            return np.array([mx, my, 1.0])
        return np.array([0.0, 0.0, -1.0])
    if success_check(state, task):
        return np.array([0.0, 0.0, -1.0])
    mx, my, dist = _toward(state.gripper, (obj.x, obj.y))
    if dist > GRASP_DIST:
        return np.array([mx, my, -1.0])
    return np.array([0.0, 0.0, 1.0])


def run_expert_episode(task: TaskSpec, seed: int, n_distractors: int = 2):
    """Roll the expert until success; returns (steps, success)."""
    state = reset(task, seed, n_distractors)
    steps = []
    success = False
    while state.step_count < task.max_steps:
        action = scripted_expert(state, task)
        steps.append((state, state.proprio(), action))
        state = step(state, action)
        if success_check(state, task):
            success = True
            break
    return steps, success


def expert_chunk(record: TrajectoryRecord, t: int, h_c: int) -> np.ndarray:
    """Ground-truth action chunk at step t, tail-padded with the final action."""
    actions = [record.steps[min(i, len(record.steps) - 1)][2]
               for i in range(t, t + h_c)]
    return np.stack(actions)


def generate_dataset(n_traj: int, tasks: list, seed: int, path=None,
                     n_distractors: int = 2) -> list:
    """Expert demonstrations for the given tasks, optionally written to disk."""
    if n_traj < 1:
        raise ContractError("n_traj must be >= 1")
    records = []
    for i in range(n_traj):
        task = tasks[i % len(tasks)]
        ep_seed = int(np.random.default_rng(
            np.random.SeedSequence((seed, i))).integers(0, 2**31 - 1))
        steps, success = run_expert_episode(task, ep_seed, n_distractors)
        if not success:
            raise ContractError(f"expert failed on trajectory {i} (seed {ep_seed})")
        records.append(TrajectoryRecord(task=task, instruction=list(task.instruction_template),
                                        steps=steps, traj_id=i, success=True))
    if path is not None:
        write_dataset(records, path, seed)
    return records


def write_dataset(records: list, path, seed: int) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"format_version": DATASET_VERSION, "seed": seed}) + "\n")
        for r in records:
            row = {
                "traj_id": r.traj_id,
                "task_kind": r.task.kind,
                "target_type": r.task.target_type,
                "instruction": list(r.instruction),
                "steps": [{
                    "gripper": [s.gripper[0], s.gripper[1]],
                    "grip": 1 if s.grip_closed else -1,
                    "objects": [[o.id, o.type_id, o.x, o.y] for o in s.objects],
                    "action": [float(a[0]), float(a[1]), float(a[2])],
                } for s, _, a in r.steps],
            }
            f.write(json.dumps(row) + "\n")


def load_dataset(path) -> list:
    """Read demonstrations, replaying actions to rebuild full states.

    Replay doubles as an integrity check: each recorded snapshot must match
    the simulated one bitwise, and the final state must solve the task.
    """
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataFormatError(f"cannot read dataset {path}: {e}") from None
    if not lines:
        raise DataFormatError(f"dataset {path} is empty")
    header = json.loads(lines[0])
    if header.get("format_version") != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset version {header.get('format_version')}")

    records = []
    for line in lines[1:]:
        row = json.loads(line)
        task = make_task(row["task_kind"], row["target_type"])
        first = row["steps"][0]
        state = WorldState(
            gripper=(first["gripper"][0], first["gripper"][1]),
            grip_closed=first["grip"] > 0,
            held=None,
            objects=tuple(SceneObject(int(o[0]), int(o[1]), o[2], o[3])
                          for o in first["objects"]),
        )
        steps = []
        for srow in row["steps"]:
            if (state.gripper[0] != srow["gripper"][0]
                    or state.gripper[1] != srow["gripper"][1]):
                raise DataFormatError(
                    f"trajectory {row['traj_id']}: replay diverged from recorded snapshot")
            action = np.array(srow["action"])
            steps.append((state, state.proprio(), action))
            state = step(state, action)
        if not success_check(state, task):
            raise DataFormatError(f"trajectory {row['traj_id']} does not end in success")
        records.append(TrajectoryRecord(task=task,
                                        instruction=[int(t) for t in row["instruction"]],
                                        steps=steps, traj_id=int(row["traj_id"]),
                                        success=True))
    return records


def rephrase_instruction(instr, synonym_table: dict, seed: int) -> list:
    """Replace every content token with a seeded-chosen synonym."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E9A)))
    out = []
    for tok in instr:
        options = synonym_table.get(int(tok))
        if options:
            out.append(int(options[int(rng.integers(0, len(options)))]))
        else:
            out.append(int(tok))
    return out


def novel_type_for(base_type: int) -> int:
    """Held-out type id whose frozen descriptor sits near base_type's."""
    return N_BASE_TYPES + (base_type % N_BASE_TYPES)


def swap_novel_object(task: TaskSpec, novel_type_id: int, vocab_size: int = 64) -> TaskSpec:
    """Task variant targeting a held-out object type with a matching novel token."""
    if novel_type_id < N_BASE_TYPES:
        raise ContractError(f"{novel_type_id} is a training type, not a novel one")
    base = novel_type_id % N_BASE_TYPES
    old_tok = object_token(task.target_type)
    new_tok = synonym_id(object_token(base), vocab_size)
    template = tuple(new_tok if t == old_tok else t for t in task.instruction_template)
    return replace(task, target_type=novel_type_id, instruction_template=template)
