"""Closed-loop imagined rollouts and the world-model evaluation protocols."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from wmeval.diffusion import DecodeConfig, TransitionQuery, TransitionResult, predict_transitions
from wmeval.env import (
    ActionChunk,
    ConfigError,
    Goal,
    Observation,
    PolicySpec,
    Trajectory,
    WorldState,
    instruction_for,
    inverse,
    is_legal,
    is_success,
    oracle_progress,
    policy_act,
    policy_chunk,
    policy_rng,
    render,
    reset,
    state_from_observation,
    step,
)
from wmeval.metrics import FrameDistance, delta_dist, derangement
from wmeval.tokens import KeyframeMemory, push_keyframe

log = logging.getLogger("wmeval.rollout")


@dataclass
class Query:
    """One transition request. ``goal`` is static task information (what the
    instruction names); learned models ignore it, the simulator oracle needs it
    to interpret frames."""

    memory: KeyframeMemory
    instruction: str
    current: Observation
    chunk: ActionChunk
    goal: Goal


class Predictor(Protocol):
    def predict(self, queries: Sequence[Query]) -> list[TransitionResult]: ...


class WorldModelPredictor:
    def __init__(self, model, vocab, decode: DecodeConfig = DecodeConfig(), use_memory: bool = True, batch_size: int = 64):
        self.model = model
        self.vocab = vocab
        self.decode = decode
        self.use_memory = use_memory
        self.batch_size = batch_size

    @property
    def capacity(self) -> int:
        return self.model.layout.capacity

    def predict(self, queries: Sequence[Query]) -> list[TransitionResult]:
        tq = [TransitionQuery(q.memory, q.instruction, q.current, q.chunk) for q in queries]
        pad_policy = "front" if self.use_memory else "drop"
        return predict_transitions(self.model, self.vocab, tq, self.decode, pad_policy, self.batch_size)


class SimulatorPredictor:
    """Perfect predictor: reads the frame back into a state and steps the true dynamics."""

    capacity = 4

    def predict(self, queries: Sequence[Query]) -> list[TransitionResult]:
        out = []
        for q in queries:
            s = state_from_observation(q.current, q.goal)
            for a in q.chunk:
                s = step(s, a)
            out.append(TransitionResult(render(s), oracle_progress(s), 0))
        return out


# ---------------------------------------------------------------------------
# imagined rollouts


@dataclass
class ImaginedRollout:
    task_seed: int
    frames: list[Observation]
    progress: list[float | None]
    actions: list[ActionChunk]
    terminal_success: bool
    abort_reason: str | None = None

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class _Live:
    task_seed: int
    goal: Goal
    instruction: str
    rng: np.random.Generator
    memory: KeyframeMemory
    frames: list = field(default_factory=list)
    progress: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    initial_progress: float = 0.0
    done: bool = False
    abort: str | None = None


def imagined_rollouts(
    predictor: Predictor,
    policy: PolicySpec,
    task_seeds: Sequence[int],
    max_chunks: int,
    chunk_size: int,
    width: int = 12,
    height: int = 12,
    capacity: int = 4,
) -> list[ImaginedRollout]:
    """Run rollouts for several tasks in lockstep (batched model calls).

    Only the reset observation comes from the simulator; afterwards the policy
    sees imagined frames and the predictor sees policy actions. A rollout
    stops once the decoded progress is 1.0 or after ``max_chunks`` chunks.
    """
    live = []
    for ts in task_seeds:
        s0 = reset(ts, width, height)
        r = _Live(ts, s0.goal, instruction_for(s0.goal), policy_rng(policy, ts), KeyframeMemory(capacity, chunk_size))
        r.frames.append(render(s0))
        r.initial_progress = oracle_progress(s0)
        r.done = r.initial_progress == 1.0
        live.append(r)
    for k in range(max_chunks):
        active = [r for r in live if not r.done]
        if not active:
            break
        queries, owners = [], []
        for r in active:
            try:
                belief = state_from_observation(r.frames[-1], r.goal, k * chunk_size)
                chunk = policy_chunk(policy, belief, chunk_size, r.rng)
            except Exception as exc:  # the policy cannot act on this frame
                r.done, r.abort = True, f"policy failed at chunk {k}: {exc}"
                log.info("rollout %d aborted: %s", r.task_seed, r.abort)
                continue
            queries.append(Query(r.memory, r.instruction, r.frames[-1], chunk, r.goal))
            owners.append(r)
        if not queries:
            break
        for r, q, res in zip(owners, queries, predictor.predict(queries)):
            r.memory = push_keyframe(r.memory, k * chunk_size, r.frames[-1])
            r.actions.append(q.chunk)
            r.frames.append(res.obs)
            r.progress.append(res.progress)
            if res.progress == 1.0:
                r.done = True
    out = []
    for r in live:
        terminal = r.progress[-1] if r.progress else r.initial_progress
        success = r.abort is None and terminal == 1.0
        out.append(ImaginedRollout(r.task_seed, r.frames, r.progress, r.actions, success, r.abort))
    return out


def imagined_rollout(predictor, policy, task_seed, max_chunks, chunk_size, width=12, height=12, capacity=4) -> ImaginedRollout:
    return imagined_rollouts(predictor, policy, [task_seed], max_chunks, chunk_size, width, height, capacity)[0]


def imagined_success_rate(predictor, policy, task_seeds, max_chunks, chunk_size, width=12, height=12, capacity=4) -> float:
    if len(task_seeds) < 1:
        raise ConfigError("need at least one rollout")
    rolls = imagined_rollouts(predictor, policy, task_seeds, max_chunks, chunk_size, width, height, capacity)
    return float(np.mean([r.terminal_success for r in rolls]))


def real_rollout_success(policy: PolicySpec, task_seed: int, max_chunks: int, chunk_size: int, width=12, height=12) -> bool:
    """Same chunked protocol as the imagined rollout, on the true simulator."""
    s = reset(task_seed, width, height)
    rng = policy_rng(policy, task_seed)
    if is_success(s):
        return True
    for _ in range(max_chunks):
        for a in policy_chunk(policy, s, chunk_size, rng):
            s = step(s, a)
        if is_success(s):
            return True
    return False


def real_success_rate(policy, task_seeds, max_chunks, chunk_size, width=12, height=12) -> float:
    return float(np.mean([real_rollout_success(policy, ts, max_chunks, chunk_size, width, height) for ts in task_seeds]))


# ---------------------------------------------------------------------------
# teacher-forced single-step predictions


@dataclass
class Sample:
    """A ground-truth transition at one chunk boundary of a recorded trajectory."""

    traj_index: int
    chunk_index: int
    query: Query
    true_next: Observation
    true_progress: float
    terminal: bool


def teacher_forced_samples(trajectories: Sequence[Trajectory], width: int, height: int, capacity: int) -> list[Sample]:
    out = []
    for i, tr in enumerate(trajectories):
        d = tr.chunk_size
        goal = tr.goal(width, height)
        mem = KeyframeMemory(capacity, d)
        for k, chunk in enumerate(tr.chunks):
            t = k * d
            q = Query(mem, tr.instruction, tr.frames[t], chunk, goal)
            out.append(Sample(i, k, q, tr.frames[t + d], tr.progress[t + d], k == len(tr.chunks) - 1))
            mem = push_keyframe(mem, t, tr.frames[t])
    return out


def transition_delta(pred_next, current, true_next, base: FrameDistance) -> float:
    return delta_dist([current, pred_next], [current, true_next], 1, base)


@dataclass
class SubsetReport:
    name: str
    n_trajectories: int
    n_transitions: int
    dist: float
    delta_dist: float
    mismatch: float
    rows: list[dict]


def controllability_eval(
    predictor: Predictor,
    subsets: dict[str, Sequence[Trajectory]],
    base: FrameDistance,
    width: int,
    height: int,
    capacity: int = 4,
) -> dict[str, SubsetReport]:
    """Teacher-forced one-chunk predictions at every chunk boundary of every trajectory."""
    mismatch = FrameDistance("mismatch_rate")
    reports = {}
    for name, trajs in subsets.items():
        if not trajs:
            raise ConfigError(f"subset {name!r} is empty")
        samples = teacher_forced_samples(trajs, width, height, capacity)
        preds = predictor.predict([s.query for s in samples])
        rows = []
        for s, p in zip(samples, preds):
            rows.append(
                {
                    "subset": name,
                    "trajectory": s.traj_index,
                    "chunk": s.chunk_index,
                    "dist": base.distance(p.obs, s.true_next),
                    "delta_dist": transition_delta(p.obs, s.query.current, s.true_next, base),
                    "mismatch": mismatch.distance(p.obs, s.true_next),
                    "pred_progress": p.progress,
                    "true_progress": s.true_progress,
                    "terminal": s.terminal,
                }
            )
        reports[name] = SubsetReport(
            name,
            len(trajs),
            len(rows),
            float(np.mean([r["dist"] for r in rows])),
            float(np.mean([r["delta_dist"] for r in rows])),
            float(np.mean([r["mismatch"] for r in rows])),
            rows,
        )
    return reports


def progress_agreement(predictor: Predictor, trajectories: Sequence[Trajectory], width: int, height: int, capacity: int = 4) -> tuple[float, list[dict]]:
    """Does (decoded terminal progress == 1.0) match the recorded success flag?

    Each trajectory's final chunk is predicted from ground-truth context.
    """
    samples = [s for s in teacher_forced_samples(trajectories, width, height, capacity) if s.terminal]
    preds = predictor.predict([s.query for s in samples])
    rows = []
    for s, p in zip(samples, preds):
        truth = trajectories[s.traj_index].success
        rows.append({"trajectory": s.traj_index, "pred_progress": p.progress, "success": truth, "agree": (p.progress == 1.0) == truth})
    return float(np.mean([r["agree"] for r in rows])), rows


# ---------------------------------------------------------------------------
# round trip


def roundtrip_source(
    task_seed: int, n_chunks: int, chunk_size: int, width: int, height: int, epsilon: float = 0.2, max_tries: int = 50
) -> tuple[WorldState, list]:
    """A legal action sequence of ``n_chunks * chunk_size`` steps.

    Actions come from the expert with legal-action noise; the expert finishes
    well before long horizons, and the noise keeps later chunks moving. A
    sequence that contains an illegal (clipped or ignored) action is rejected
    and the policy seed advanced.
    """
    s0 = reset(task_seed, width, height)
    for attempt in range(max_tries):
        spec = PolicySpec("epsilon_noisy", epsilon=epsilon, seed=attempt)
        rng = policy_rng(spec, task_seed)
        s, acts, ok = s0, [], True
        for _ in range(n_chunks * chunk_size):
            a = policy_act(spec, s, rng)
            if not is_legal(s, a):
                ok = False
                break
            acts.append(a)
            s = step(s, a)
        if ok:
            return s0, acts
        log.info("round-trip source for task %d rejected (illegal action), attempt %d", task_seed, attempt)
    raise RuntimeError(f"no legal round-trip source for task {task_seed}")


def _chunks(actions: Sequence, d: int) -> list[tuple]:
    return [tuple(actions[i : i + d]) for i in range(0, len(actions), d)]


def _advance(predictor, states, chunk_lists, k_offset, chunk_size):
    """Feed each rollout its next chunks; ``states`` holds (memory, frame, instruction, goal, frame_index)."""
    n = len(chunk_lists[0]) if chunk_lists else 0
    for j in range(n):
        queries = [Query(st[0], st[2], st[1], cl[j], st[3]) for st, cl in zip(states, chunk_lists)]
        preds = predictor.predict(queries)
        new = []
        for st, p in zip(states, preds):
            mem = push_keyframe(st[0], st[4], st[1])
            new.append((mem, p.obs, st[2], st[3], st[4] + chunk_size))
        states = new
    return states


def roundtrip_eval(
    predictor: Predictor,
    horizons: Sequence[int],
    task_seeds: Sequence[int],
    chunk_size: int,
    width: int,
    height: int,
    base: FrameDistance,
    capacity: int = 4,
) -> list[dict]:
    """Forward H chunks, then the reversed inverse actions; distance from start.

    All horizons share one source sequence per task, so the forward pass is
    run once and branched at each horizon.
    """
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise ConfigError("horizons must be >= 1")
    h_max = horizons[-1]
    sources = [roundtrip_source(ts, h_max, chunk_size, width, height) for ts in task_seeds]
    fwd = [_chunks(acts, chunk_size) for _, acts in sources]
    states = [
        (KeyframeMemory(capacity, chunk_size), render(s0), instruction_for(s0.goal), s0.goal, 0) for s0, _ in sources
    ]
    rows = []
    done = 0
    for h in horizons:
        states = _advance(predictor, states, [f[done:h] for f in fwd], done, chunk_size)
        done = h
        back = [_chunks([inverse(a) for a in reversed(acts[: h * chunk_size])], chunk_size) for _, acts in sources]
        final = _advance(predictor, states, back, h, chunk_size)
        for ts, (s0, _), st in zip(task_seeds, sources, final):
            rows.append({"H": h, "seed": ts, "distance": base.distance(render(s0), st[1])})
    return rows


# ---------------------------------------------------------------------------
# action shuffling


def shuffle_eval(
    predictor: Predictor,
    samples: Sequence[Sample],
    p_values: Sequence[float],
    seed: int,
    base: FrameDistance,
) -> list[dict]:
    """Aligned vs chunk-swapped Δ-distance over a batch of transitions.

    One derangement and one uniform draw per sample are shared by every p;
    sample i is swapped iff its draw is below p, so swapped sets are nested.
    """
    if any(not 0.0 <= p <= 1.0 for p in p_values):
        raise ConfigError("swap probabilities must be in [0, 1]")
    if len(samples) < 2 and any(p > 0 for p in p_values):
        raise ConfigError("action shuffling needs a batch of at least 2")
    rng = np.random.default_rng(seed)
    perm = derangement(len(samples), rng) if len(samples) >= 2 else np.arange(len(samples))
    u = rng.random(len(samples))
    aligned = predictor.predict([s.query for s in samples])
    swapped_q = [
        Query(s.query.memory, s.query.instruction, s.query.current, samples[perm[i]].query.chunk, s.query.goal)
        for i, s in enumerate(samples)
    ]
    swapped = predictor.predict(swapped_q)
    d_al = np.array([transition_delta(a.obs, s.query.current, s.true_next, base) for a, s in zip(aligned, samples)])
    d_sw = np.array([transition_delta(a.obs, s.query.current, s.true_next, base) for a, s in zip(swapped, samples)])
    rows = []
    for p in p_values:
        use = u < p
        rows.append(
            {
                "p": float(p),
                "aligned_delta_dist": float(d_al.mean()),
                "corrupted_delta_dist": float(np.where(use, d_sw, d_al).mean()),
                "n_swapped": int(use.sum()),
                "n": len(samples),
            }
        )
    return rows
