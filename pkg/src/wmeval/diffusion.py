"""Masked discrete diffusion over the sequence suffix: corruption, training, decoding."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from wmeval.env import Action, Observation, Trajectory
from wmeval.neural import AdamW, LossBatch, WorldModelNet, loss_and_grad, optimizer_step
from wmeval.tokens import (
    KeyframeMemory,
    SequenceLayout,
    TokenSequence,
    Vocabulary,
    build_sequence,
    detokenize_progress,
    push_keyframe,
)

log = logging.getLogger("wmeval.decode")


class LinearSchedule:
    """m(lambda) = lambda."""

    kind = "linear"

    def __call__(self, lam):
        return np.clip(np.asarray(lam, dtype=np.float64), 0.0, 1.0)


SCHEDULES = {"linear": LinearSchedule}


def make_schedule(kind: str = "linear"):
    try:
        return SCHEDULES[kind]()
    except KeyError:
        raise ValueError(f"unknown mask schedule {kind!r}") from None


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 16
    rule: str = "confidence_topk"
    temperature: float = 0.0
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("decode steps must be >= 1")
        if self.rule != "confidence_topk":
            raise ValueError(f"unknown unmask rule {self.rule!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


# ---------------------------------------------------------------------------
# forward corruption


def mask_batch(clean: np.ndarray, layout: SequenceLayout, vocab: Vocabulary, lam, schedule, rng: np.random.Generator):
    """Mask each non-PAD suffix position independently with probability m(lam).

    Returns ``(ids, mask)``; context positions are never touched.
    """
    clean = np.asarray(clean)
    B = clean.shape[0]
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    start = layout.context_end
    suffix = clean[:, start:]
    eligible = suffix != vocab.pad_id
    u = rng.random(suffix.shape)
    hit = (u < schedule(lam)[:, None]) & eligible
    mask = np.zeros(clean.shape, dtype=bool)
    mask[:, start:] = hit
    ids = np.where(mask, vocab.mask_id, clean)
    return ids, mask


def mask_forward(seq: TokenSequence, lam: float, schedule, rng: np.random.Generator, vocab: Vocabulary) -> TokenSequence:
    ids, mask = mask_batch(seq.ids[None], seq.layout, vocab, lam, schedule, rng)
    return TokenSequence(ids[0], seq.layout, mask[0])


def position_weights(clean: np.ndarray, layout: SequenceLayout, vocab: Vocabulary, w_vis: float, w_score: float) -> np.ndarray:
    w = np.zeros(clean.shape, dtype=np.float64)
    w[..., layout["target"].slice] = w_vis
    w[..., layout["progress"].offset] = w_score
    return np.where(clean == vocab.pad_id, 0.0, w)


def make_loss_batch(clean, layout, vocab, lam, schedule, rng, w_vis=1.0, w_score=2.0) -> LossBatch:
    clean = np.asarray(clean)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (clean.shape[0],)).copy()
    ids, mask = mask_batch(clean, layout, vocab, lam, schedule, rng)
    n_target = (clean[:, layout.context_end :] != vocab.pad_id).sum(axis=1)
    realized = mask.sum(axis=1) / np.maximum(n_target, 1)
    return LossBatch(
        ids=ids,
        clean=clean,
        mask=mask,
        weights=position_weights(clean, layout, vocab, w_vis, w_score),
        lam=realized,
        m_lam=schedule(lam),
        n_target=np.maximum(n_target, 1),
    )


# ---------------------------------------------------------------------------
# training


def trajectory_sequences(
    traj: Trajectory, vocab: Vocabulary, layout: SequenceLayout, pad_policy: str = "front"
) -> list[TokenSequence]:
    """One clean training sequence per chunk boundary of a trajectory."""
    d = layout.chunk_size
    if traj.chunk_size != d:
        raise ValueError(f"trajectory chunk size {traj.chunk_size} != layout chunk size {d}")
    out = []
    mem = KeyframeMemory(layout.capacity, d)
    for k, chunk in enumerate(traj.chunks):
        t = k * d
        seq = build_sequence(
            vocab,
            layout,
            mem,
            traj.instruction,
            traj.frames[t],
            chunk,
            traj.frames[t + d],
            traj.progress[t + d],
            pad_policy,
        )
        out.append(seq)
        mem = push_keyframe(mem, t, traj.frames[t])
    return out


def stack_sequences(trajectories: Sequence[Trajectory], vocab: Vocabulary, layout: SequenceLayout) -> np.ndarray:
    rows = [s.ids for tr in trajectories for s in trajectory_sequences(tr, vocab, layout)]
    return np.stack(rows) if rows else np.zeros((0, layout.length), dtype=np.int64)


@dataclass
class StepStats:
    loss: float
    lam_mean: float
    mask_fraction: float


def train_step(
    model: WorldModelNet,
    opt: AdamW,
    clean: np.ndarray,
    vocab: Vocabulary,
    schedule,
    rng: np.random.Generator,
    w_vis: float = 1.0,
    w_score: float = 2.0,
    lr: float | None = None,
) -> StepStats:
    """Sample lambda ~ U(0, 1) per record, mask, take one optimizer step.

    Returns the loss measured before the update.
    """
    layout = model.layout
    lam = rng.random(clean.shape[0])
    batch = make_loss_batch(clean, layout, vocab, lam, schedule, rng, w_vis, w_score)
    loss, grads = loss_and_grad(model, batch)
    if not math.isfinite(loss):
        from wmeval.neural import TrainingError

        raise TrainingError(f"non-finite loss {loss}")
    optimizer_step(model, grads, opt, lr)
    frac = float(batch.mask.sum() / batch.n_target.sum())
    return StepStats(loss, float(lam.mean()), frac)


def lr_at(step: int, total: int, base: float, schedule: str = "cosine", floor: float = 0.1) -> float:
    if schedule == "constant" or total <= 1:
        return base
    if schedule == "cosine":
        t = min(step / total, 1.0)
        return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


# ---------------------------------------------------------------------------
# decoding


def unmask_quotas(n_masked: int, steps: int) -> list[int]:
    """Split ``n_masked`` commits over ``steps`` rounds, remaining masks spread evenly."""
    out = []
    remaining = n_masked
    for s in range(steps):
        q = math.ceil(remaining / (steps - s)) if remaining else 0
        out.append(q)
        remaining -= q
    return out


@dataclass
class DecodeDiagnostics:
    rounds: int
    mean_entropy: list[float]


def decode(model, ids: np.ndarray, config: DecodeConfig, vocab: Vocabulary, layout: SequenceLayout | None = None):
    """Iterative confidence-ordered parallel decoding of every MASK in ``ids``.

    ``model`` is anything exposing ``logits(ids, lam) -> [B, L, V]``. Each
    round commits, per sequence, the ``ceil(remaining / rounds_left)``
    masked positions with the highest max-probability. MASK and PAD are never
    emitted. Returns the completed ids and diagnostics.
    """
    layout = layout or model.layout
    ids = np.array(ids, dtype=np.int64, copy=True)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    start = layout.context_end
    n_target = np.maximum((ids[:, start:] != vocab.pad_id).sum(axis=1), 1)
    rng = np.random.default_rng(config.seed) if config.temperature > 0 else None
    banned = [vocab.mask_id, vocab.pad_id]
    entropies = []
    for s in range(config.steps):
        masked = ids == vocab.mask_id
        remaining = masked.sum(axis=1)
        if not remaining.any():
            break
        quota = np.ceil(remaining / (config.steps - s)).astype(np.int64)
        lam = remaining / n_target
        logits = model.logits(ids, lam)
        logits = torch.as_tensor(logits)[:, start:, :].to(torch.float64)
        logits[..., banned] = -math.inf
        probs = torch.softmax(logits, dim=-1)
        conf, pred = probs.max(dim=-1)
        conf, pred = conf.numpy(), pred.numpy()
        if rng is not None:
            scaled = torch.softmax(logits / config.temperature, dim=-1).numpy()
            u = rng.random(scaled.shape[:2])[..., None]
            pred = np.minimum((scaled.cumsum(-1) < u).sum(-1), scaled.shape[-1] - 1)
        if config.verbose:
            p = probs.numpy()
            ent = -(p * np.log(np.clip(p, 1e-30, None))).sum(-1)
            entropies.append(float(ent[masked[:, start:]].mean()))
        for b in range(ids.shape[0]):
            if quota[b] == 0:
                continue
            m = masked[b, start:]
            cand = np.flatnonzero(m)
            order = cand[np.argsort(-conf[b, cand], kind="stable")][: quota[b]]
            ids[b, start + order] = pred[b, order]
    diag = DecodeDiagnostics(rounds=config.steps, mean_entropy=entropies)
    return (ids[0] if single else ids), diag


# ---------------------------------------------------------------------------
# single transitions


@dataclass
class TransitionQuery:
    memory: KeyframeMemory
    instruction: str
    current: Observation
    chunk: Sequence[Action]


@dataclass
class TransitionResult:
    obs: Observation
    progress: float | None
    invalid_ids: int


def predict_transitions(
    model: WorldModelNet,
    vocab: Vocabulary,
    queries: Sequence[TransitionQuery],
    config: DecodeConfig,
    pad_policy: str = "front",
    batch_size: int = 64,
) -> list[TransitionResult]:
    layout = model.layout
    out: list[TransitionResult] = []
    for lo in range(0, len(queries), batch_size):
        part = queries[lo : lo + batch_size]
        ids = np.stack(
            [build_sequence(vocab, layout, q.memory, q.instruction, q.current, q.chunk, pad_policy=pad_policy).ids for q in part]
        )
        done, diag = decode(model, ids, config, vocab, layout)
        tgt = done[:, layout["target"].slice]
        bad = ~vocab.is_visual(tgt)
        invalid = bad.sum(axis=1)
        tgt = np.where(bad, 0, tgt)
        prog = done[:, layout["progress"].offset]
        for b in range(len(part)):
            out.append(
                TransitionResult(
                    obs=tgt[b].reshape(layout.height, layout.width),
                    progress=detokenize_progress(int(prog[b]), vocab),
                    invalid_ids=int(invalid[b]),
                )
            )
        if config.verbose:
            log.info(
                json.dumps(
                    {
                        "event": "decode",
                        "batch": len(part),
                        "invalid_ids": int(invalid.sum()),
                        "round_entropy": [round(e, 6) for e in diag.mean_entropy],
                    }
                )
            )
    return out


def predict_transition(
    model: WorldModelNet,
    vocab: Vocabulary,
    memory: KeyframeMemory,
    instruction: str,
    current_obs: Observation,
    chunk: Sequence[Action],
    config: DecodeConfig,
) -> tuple[Observation, float | None]:
    res = predict_transitions(model, vocab, [TransitionQuery(memory, instruction, current_obs, chunk)], config)[0]
    return res.obs, res.progress
