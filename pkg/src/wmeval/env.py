"""Gridtable: a deterministic, invertible toy pick-and-place environment.

The table is a ``width x height`` grid holding two objects, a gripper and a
target mark. The task is to carry the goal object onto the mark and let go.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; rendered
frames are ``(height, width)`` arrays indexed ``[y, x]``.

Action semantics
----------------
An action is a move ``(dx, dy)`` with ``|dx|, |dy| <= 1`` plus a grip command.
A grasp is applied *before* the move (pick up, then carry) and a release is
applied *after* the move (carry, then put down). With that ordering every
legal action is undone exactly by ``inverse(action)``:

    step(step(s, a), inverse(a)) == s        (ignoring step_count)

Infeasible sub-commands never raise: moves clip at the walls and grips that
cannot succeed leave the grip channel untouched.

Rendering
---------
The gripper occludes whatever sits under it; a loaded gripper shows which
object it carries. Objects resting on the mark have their own codes, so the
mark stays visible unless the gripper covers it. Because the object count is
fixed, at most one object can be hidden and its cell is always recoverable
(see :func:`parse_observation`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PALETTE_SIZE = 16
BACKGROUND = 0
TARGET = 1
GRIPPER = 2
OBJECT_BASE = 3  # unheld object i -> 3 + i
HOLD_BASE = 5  # gripper carrying object i -> 5 + i
ON_TARGET_BASE = 7  # unheld object i resting on the mark -> 7 + i
N_OBJECTS = 2
COLOR_NAMES = ("red", "blue")
PROGRESS_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

Cell = tuple[int, int]
Observation = np.ndarray


class Grip(IntEnum):
    NONE = 0
    GRASP = 1
    RELEASE = 2


@dataclass(frozen=True)
class Action:
    dx: int = 0
    dy: int = 0
    grip: Grip = Grip.NONE

    def __post_init__(self):
        if abs(self.dx) > 1 or abs(self.dy) > 1:
            raise ValueError(f"move components must be in [-1, 1], got ({self.dx}, {self.dy})")
        object.__setattr__(self, "grip", Grip(self.grip))

    def as_triple(self) -> tuple[int, int, str]:
        return (self.dx, self.dy, self.grip.name.lower())

    @classmethod
    def from_triple(cls, triple: Sequence) -> "Action":
        dx, dy, grip = triple
        if isinstance(grip, str):
            grip = Grip[grip.upper()]
        return cls(int(dx), int(dy), Grip(grip))


NOOP = Action()
ACTIONS: tuple[Action, ...] = tuple(
    Action(dx, dy, g) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for g in Grip
)
ActionChunk = tuple[Action, ...]


@dataclass(frozen=True)
class Item:
    oid: int
    color: int
    pos: Cell


@dataclass(frozen=True)
class Goal:
    """Carry object ``oid`` onto ``target``. ``origin`` is where it started."""

    oid: int
    target: Cell
    origin: Cell


@dataclass(frozen=True)
class WorldState:
    width: int
    height: int
    items: tuple[Item, ...]
    gripper: Cell
    held: int | None
    goal: Goal
    step_count: int = 0

    def item(self, oid: int) -> Item:
        for it in self.items:
            if it.oid == oid:
                return it
        raise KeyError(oid)

    def item_at(self, cell: Cell, exclude: int | None = None) -> Item | None:
        for it in self.items:
            if it.pos == cell and it.oid != exclude:
                return it
        return None

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def validate(self) -> None:
        if not self.in_bounds(self.gripper):
            raise ValueError(f"gripper {self.gripper} out of bounds")
        ids = [it.oid for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids")
        if self.held is not None and self.held not in ids:
            raise ValueError(f"held object {self.held} does not exist")
        resting = [it.pos for it in self.items if it.oid != self.held]
        if len(set(resting)) != len(resting):
            raise ValueError("two unheld objects share a cell")
        for it in self.items:
            if not self.in_bounds(it.pos):
                raise ValueError(f"object {it.oid} out of bounds")
            if not 1 <= it.color < PALETTE_SIZE:
                raise ValueError(f"object {it.oid} has invalid color {it.color}")
        if self.held is not None and self.item(self.held).pos != self.gripper:
            raise ValueError("held object is not at the gripper")
        if self.goal.oid not in ids or not self.in_bounds(self.goal.target):
            raise ValueError("invalid goal")
        if self.step_count < 0:
            raise ValueError("negative step_count")

    def same_layout(self, other: "WorldState") -> bool:
        """Equality ignoring ``step_count``."""
        return replace(self, step_count=0) == replace(other, step_count=0)


def _chebyshev(a: Cell, b: Cell) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def instruction_for(goal: Goal) -> str:
    return f"move {COLOR_NAMES[goal.oid]} to mark"


def reset(task_seed: int, width: int = 12, height: int = 12) -> WorldState:
    """Sample an initial layout; deterministic in ``task_seed``.

    All four landmarks sit on distinct cells, the gripper starts at least two
    cells (Chebyshev) away from both objects and the mark is at least three
    cells (Manhattan) from the goal object.
    """
    if width < 4 or height < 4:
        raise ValueError("grid must be at least 4x4")
    rng = np.random.default_rng(task_seed)
    n_cells = width * height
    while True:
        cells = rng.choice(n_cells, size=N_OBJECTS + 2, replace=False)
        pts = [(int(c % width), int(c // width)) for c in cells]
        objs, target, grip = pts[:N_OBJECTS], pts[N_OBJECTS], pts[N_OBJECTS + 1]
        goal_oid = int(rng.integers(N_OBJECTS))
        if any(_chebyshev(grip, p) < 2 for p in objs):
            continue
        if _manhattan(objs[goal_oid], target) < 3:
            continue
        break
    items = tuple(Item(i, OBJECT_BASE + i, objs[i]) for i in range(N_OBJECTS))
    state = WorldState(width, height, items, grip, None, Goal(goal_oid, target, objs[goal_oid]))
    state.validate()
    return state


def _clip(state: WorldState, cell: Cell) -> Cell:
    return (min(max(cell[0], 0), state.width - 1), min(max(cell[1], 0), state.height - 1))


def step(state: WorldState, action: Action) -> WorldState:
    held = state.held
    if action.grip == Grip.GRASP and held is None:
        under = state.item_at(state.gripper)
        if under is not None:
            held = under.oid
    dest = _clip(state, (state.gripper[0] + action.dx, state.gripper[1] + action.dy))
    items = state.items
    if held is not None:
        items = tuple(replace(it, pos=dest) if it.oid == held else it for it in items)
    if action.grip == Grip.RELEASE and held is not None:
        if not any(it.pos == dest and it.oid != held for it in items):
            held = None
    return replace(state, items=items, gripper=dest, held=held, step_count=state.step_count + 1)


def inverse(action: Action) -> Action:
    grip = {Grip.NONE: Grip.NONE, Grip.GRASP: Grip.RELEASE, Grip.RELEASE: Grip.GRASP}[action.grip]
    return Action(-action.dx, -action.dy, grip)


def is_legal(state: WorldState, action: Action) -> bool:
    """True when nothing in ``action`` is clipped or ignored."""
    dest = (state.gripper[0] + action.dx, state.gripper[1] + action.dy)
    if not state.in_bounds(dest):
        return False
    if action.grip == Grip.GRASP:
        return state.held is None and state.item_at(state.gripper) is not None
    if action.grip == Grip.RELEASE:
        return state.held is not None and state.item_at(dest, exclude=state.held) is None
    return True


def legal_actions(state: WorldState) -> list[Action]:
    return [a for a in ACTIONS if is_legal(state, a)]


def oracle_progress(state: WorldState) -> float:
    """Six-phase task progress computed from the symbolic state."""
    goal = state.goal
    obj = state.item(goal.oid)
    if state.held != goal.oid:
        if obj.pos == goal.target:
            return 1.0
        if _chebyshev(state.gripper, obj.pos) <= 1:
            return 0.2
        return 0.0
    if state.gripper == goal.target:
        return 0.8
    if _chebyshev(state.gripper, goal.origin) <= 1:
        return 0.4
    if _manhattan(state.gripper, goal.target) < _manhattan(goal.origin, goal.target):
        return 0.6
    return 0.4


def is_success(state: WorldState) -> bool:
    return oracle_progress(state) == 1.0


def render(state: WorldState) -> Observation:
    grid = np.full((state.height, state.width), BACKGROUND, dtype=np.int64)
    tx, ty = state.goal.target
    grid[ty, tx] = TARGET
    for it in state.items:
        if it.oid == state.held:
            continue
        x, y = it.pos
        grid[y, x] = ON_TARGET_BASE + it.oid if it.pos == state.goal.target else it.color
    gx, gy = state.gripper
    grid[gy, gx] = GRIPPER if state.held is None else HOLD_BASE + state.held
    return grid


class FrameParseError(ValueError):
    pass


@dataclass
class ParsedFrame:
    gripper: Cell
    held: int | None
    objects: dict[int, Cell]
    on_target: dict[int, bool]
    target: Cell | None


def parse_observation(obs: Observation) -> ParsedFrame:
    """Recover the symbolic layout from a rendered frame.

    Raises :class:`FrameParseError` when the frame is not a rendering of any
    valid state (duplicate landmarks, missing gripper, unknown codes, ...).
    """
    obs = np.asarray(obs)
    height, width = obs.shape
    gripper: Cell | None = None
    held: int | None = None
    objects: dict[int, Cell] = {}
    on_target: dict[int, bool] = {}
    target: Cell | None = None
    for y in range(height):
        for x in range(width):
            code = int(obs[y, x])
            cell = (x, y)
            if code == BACKGROUND:
                continue
            if code == GRIPPER or HOLD_BASE <= code < HOLD_BASE + N_OBJECTS:
                if gripper is not None:
                    raise FrameParseError(f"second gripper at {cell}")
                gripper = cell
                if code != GRIPPER:
                    held = code - HOLD_BASE
                    objects[held] = cell
                    on_target[held] = False
            elif code == TARGET or ON_TARGET_BASE <= code < ON_TARGET_BASE + N_OBJECTS:
                if target is not None:
                    raise FrameParseError(f"second target at {cell}")
                target = cell
                if code != TARGET:
                    oid = code - ON_TARGET_BASE
                    if oid in objects:
                        raise FrameParseError(f"object {oid} appears twice")
                    objects[oid] = cell
                    on_target[oid] = True
            elif OBJECT_BASE <= code < OBJECT_BASE + N_OBJECTS:
                oid = code - OBJECT_BASE
                if oid in objects:
                    raise FrameParseError(f"object {oid} appears twice")
                objects[oid] = cell
                on_target[oid] = False
            else:
                raise FrameParseError(f"unknown code {code} at {cell}")
    if gripper is None:
        raise FrameParseError("no gripper")
    missing = [i for i in range(N_OBJECTS) if i not in objects]
    if len(missing) > 1:
        raise FrameParseError(f"objects {missing} missing")
    if missing:
        if held is not None and held == missing[0]:
            raise FrameParseError("held object missing")
        objects[missing[0]] = gripper
        on_target[missing[0]] = False  # resolved below once the target is known
    if target is None:
        # only the gripper can hide the mark
        target = gripper
        if missing:
            on_target[missing[0]] = True
    return ParsedFrame(gripper, held, objects, on_target, target)


def state_from_observation(obs: Observation, goal: Goal, step_count: int = 0) -> WorldState:
    """Rebuild a ``WorldState`` from a frame plus the (static) task goal."""
    parsed = parse_observation(obs)
    if parsed.target != goal.target:
        raise FrameParseError(f"mark at {parsed.target}, task says {goal.target}")
    height, width = np.asarray(obs).shape
    items = tuple(Item(i, OBJECT_BASE + i, parsed.objects[i]) for i in range(N_OBJECTS))
    state = WorldState(width, height, items, parsed.gripper, parsed.held, goal, step_count)
    try:
        state.validate()
    except ValueError as exc:
        raise FrameParseError(str(exc)) from exc
    return state


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "expert"  # expert | epsilon_noisy | mixture
    epsilon: float = 0.0
    mix_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("expert", "epsilon_noisy", "mixture"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError(f"mix_weight must be in [0, 1], got {self.mix_weight}")

    @property
    def name(self) -> str:
        if self.kind == "expert":
            return "expert"
        if self.kind == "epsilon_noisy":
            return f"eps{self.epsilon:g}"
        return f"mix{self.mix_weight:g}"


def _toward(src: Cell, dst: Cell) -> tuple[int, int]:
    return (int(np.sign(dst[0] - src[0])), int(np.sign(dst[1] - src[1])))


def expert_action(state: WorldState) -> Action:
    """Greedy pick-and-place: walk to the object, grasp, walk to the mark, release."""
    goal = state.goal
    if is_success(state):
        return NOOP
    obj = state.item(goal.oid)
    g = state.gripper
    if state.held is not None and state.held != goal.oid:
        # wrong object in hand: put it down somewhere off the mark
        if g != goal.target and is_legal(state, Action(0, 0, Grip.RELEASE)):
            return Action(0, 0, Grip.RELEASE)
        for a in ACTIONS:
            dest = (g[0] + a.dx, g[1] + a.dy)
            if a.grip == Grip.RELEASE and dest != goal.target and is_legal(state, a):
                return a
    blocker = state.item_at(goal.target, exclude=state.held)
    if blocker is not None and blocker.oid != goal.oid:
        if state.held == goal.oid:
            if is_legal(state, Action(0, 0, Grip.RELEASE)):
                return Action(0, 0, Grip.RELEASE)
        elif g == blocker.pos:
            return Action(0, 0, Grip.GRASP)
        else:
            return Action(*_toward(g, blocker.pos))
    if state.held == goal.oid:
        if g == goal.target:
            return Action(0, 0, Grip.RELEASE)
        return Action(*_toward(g, goal.target))
    if g == obj.pos:
        return Action(0, 0, Grip.GRASP)
    return Action(*_toward(g, obj.pos))


def policy_act(spec: PolicySpec, state: WorldState, rng: np.random.Generator) -> Action:
    if spec.kind == "expert":
        return expert_action(state)
    u = rng.random()
    if spec.kind == "epsilon_noisy":
        if u < spec.epsilon:
            legal = legal_actions(state)
            return legal[int(rng.integers(len(legal)))]
        return expert_action(state)
    if u < spec.mix_weight:
        return expert_action(state)
    return ACTIONS[int(rng.integers(len(ACTIONS)))]


def policy_chunk(
    spec: PolicySpec, state: WorldState, chunk_size: int, rng: np.random.Generator
) -> ActionChunk:
    """Plan ``chunk_size`` actions open-loop from one observed state.

    The policy rolls its own copy of the dynamics forward, so planning a chunk
    from the true state reproduces per-step acting exactly.
    """
    actions = []
    s = state
    for _ in range(chunk_size):
        a = policy_act(spec, s, rng)
        actions.append(a)
        s = step(s, a)
    return tuple(actions)


def policy_rng(spec: PolicySpec, task_seed: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, task_seed])


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    task_seed: int
    instruction: str
    frames: list[Observation]
    chunks: list[ActionChunk]
    progress: list[float]
    success: bool
    policy: str = field(default="", compare=False)

    @property
    def chunk_size(self) -> int:
        return len(self.chunks[0]) if self.chunks else 0

    def goal(self, width: int, height: int) -> Goal:
        return reset(self.task_seed, width, height).goal

    def to_record(self) -> dict:
        return {
            "task_seed": self.task_seed,
            "instruction": self.instruction,
            "frames": [f.reshape(-1).tolist() for f in self.frames],
            "chunks": [[list(a.as_triple()) for a in c] for c in self.chunks],
            "progress": list(self.progress),
            "success": bool(self.success),
        }

    @classmethod
    def from_record(cls, rec: dict, width: int, height: int) -> "Trajectory":
        frames = [np.asarray(f, dtype=np.int64).reshape(height, width) for f in rec["frames"]]
        chunks = [tuple(Action.from_triple(t) for t in c) for c in rec["chunks"]]
        return cls(
            task_seed=int(rec["task_seed"]),
            instruction=rec["instruction"],
            frames=frames,
            chunks=chunks,
            progress=[float(p) for p in rec["progress"]],
            success=bool(rec["success"]),
        )


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def check_chunk_size(chunk_size: int) -> None:
    if not 2 <= chunk_size <= 8:
        raise ConfigError(f"chunk size must be in [2, 8], got {chunk_size}")


def run_episode(
    spec: PolicySpec,
    task_seed: int,
    chunk_size: int,
    max_steps: int,
    width: int = 12,
    height: int = 12,
    linger_chunks: int = 0,
) -> Trajectory:
    check_chunk_size(chunk_size)
    rng = policy_rng(spec, task_seed)
    s = reset(task_seed, width, height)
    frames = [render(s)]
    progress = [oracle_progress(s)]
    actions: list[Action] = []

    def advance(a: Action) -> None:
        nonlocal s
        s = step(s, a)
        actions.append(a)
        frames.append(render(s))
        progress.append(oracle_progress(s))

    while len(actions) < max_steps and not is_success(s):
        advance(policy_act(spec, s, rng))
    while len(actions) % chunk_size:
        advance(NOOP)
    success = is_success(s)
    if success:
        for _ in range(linger_chunks * chunk_size):
            advance(NOOP)
    chunks = [tuple(actions[i : i + chunk_size]) for i in range(0, len(actions), chunk_size)]
    return Trajectory(task_seed, instruction_for(s.goal), frames, chunks, progress, success, spec.name)


def episode_seeds(seed: int, n_episodes: int) -> list[int]:
    return [seed * 1_000_003 + i for i in range(n_episodes)]


def collect_trajectories(
    spec: PolicySpec,
    n_episodes: int,
    chunk_size: int,
    max_steps: int,
    seed: int,
    width: int = 12,
    height: int = 12,
    linger_chunks: int = 0,
) -> list[Trajectory]:
    check_chunk_size(chunk_size)
    return [
        run_episode(spec, ts, chunk_size, max_steps, width, height, linger_chunks)
        for ts in episode_seeds(seed, n_episodes)
    ]


def random_legal_actions(state: WorldState, n: int, rng: np.random.Generator) -> list[Action]:
    out = []
    s = state
    for _ in range(n):
        legal = legal_actions(s)
        a = legal[int(rng.integers(len(legal)))]
        out.append(a)
        s = step(s, a)
    return out


def write_jsonl(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    from wmeval.io import atomic_write_text

    lines = [json.dumps(t.to_record(), separators=(",", ":")) for t in trajectories]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path, width: int, height: int) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Trajectory.from_record(json.loads(line), width, height))
    return out


def success_rate(trajectories: Sequence[Trajectory]) -> float:
    if not trajectories:
        return math.nan
    return sum(t.success for t in trajectories) / len(trajectories)
