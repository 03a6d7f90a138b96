"""Frame distances, transition (delta) distance, correlation and rank-violation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from wmeval.env import PALETTE_SIZE, FrameParseError, Goal, Observation, is_success, state_from_observation

FEATURE_DIM = 8


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FrameDistance:
    """Per-cell base distance between frames.

    ``mismatch_rate`` uses one-hot cell features and counts the fraction of
    cells whose features differ. ``embedded_l2`` maps each one-hot code
    through a fixed seeded random matrix and averages the per-cell L2 norm.
    """

    kind: str = "embedded_l2"
    seed: int = 0
    dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.kind not in ("mismatch_rate", "embedded_l2"):
            raise MetricError(f"unknown frame distance {self.kind!r}")

    @property
    def table(self) -> np.ndarray:
        if self.kind == "mismatch_rate":
            return np.eye(PALETTE_SIZE)
        return np.random.default_rng(self.seed).standard_normal((PALETTE_SIZE, self.dim))

    def features(self, obs: Observation) -> np.ndarray:
        """[H, W, D] float features of a frame."""
        obs = np.asarray(obs)
        if obs.min() < 0 or obs.max() >= PALETTE_SIZE:
            raise MetricError("cell code outside the palette")
        return self.table[obs]

    def between_features(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.shape != b.shape:
            raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
        diff = a - b
        if self.kind == "mismatch_rate":
            return float(np.any(np.abs(diff) > 1e-12, axis=-1).mean())
        return float(np.sqrt((diff**2).sum(-1)).mean())

    def distance(self, a: Observation, b: Observation) -> float:
        return self.between_features(self.features(a), self.features(b))


def frame_distance(a: Observation, b: Observation, base: FrameDistance = FrameDistance()) -> float:
    return base.distance(a, b)


def rms_normalize(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else np.zeros_like(x)


def delta_dist(pred: Sequence[Observation], true: Sequence[Observation], stride: int = 1, base: FrameDistance = FrameDistance()) -> float:
    """Mean base distance between RMS-normalized difference features.

    ``pred`` and ``true`` are aligned frame lists; differences are taken
    between entries ``stride`` apart.
    """
    if len(pred) != len(true):
        raise MetricError(f"length mismatch {len(pred)} vs {len(true)}")
    if stride < 1 or len(pred) <= stride:
        raise MetricError("need at least two frames per sequence")
    fp = [base.features(f) for f in pred]
    ft = [base.features(f) for f in true]
    vals = []
    for t in range(len(pred) - stride):
        dp = rms_normalize(fp[t + stride] - fp[t])
        dt = rms_normalize(ft[t + stride] - ft[t])
        vals.append(base.between_features(dp, dt))
    return float(np.mean(vals))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("pearson needs two equal-length 1-d sequences")
    if len(x) < 2:
        raise MetricError("pearson needs at least two points")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt((x * x).sum()), np.sqrt((y * y).sum())
    if sx == 0 or sy == 0:
        raise MetricError("pearson undefined: zero variance")
    return float(np.clip((x * y).sum() / (sx * sy), -1.0, 1.0))


def mmrv(real: Sequence[float], imagined: Sequence[float]) -> float:
    """Mean over policies of the largest real-rate gap among rank violations.

    A pair violates when the strict orders disagree; ties never violate.
    """
    r = np.asarray(real, dtype=np.float64)
    s = np.asarray(imagined, dtype=np.float64)
    if r.shape != s.shape or r.ndim != 1:
        raise MetricError("mmrv needs two equal-length 1-d sequences")
    if len(r) < 2:
        raise MetricError("mmrv needs at least two policies")
    r_lt = r[:, None] < r[None, :]
    r_gt = r[:, None] > r[None, :]
    s_lt = s[:, None] < s[None, :]
    s_gt = s[:, None] > s[None, :]
    viol = (r_lt & s_gt) | (r_gt & s_lt)
    gaps = np.where(viol, np.abs(r[:, None] - r[None, :]), 0.0)
    # exactly rounded sum, so the value does not depend on summation order
    return math.fsum(gaps.max(axis=1).tolist()) / len(r)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise MetricError("no derangement exists for n < 2")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def frame_success_judge(obs: Observation, goal: Goal) -> bool:
    """Success read off a frame alone; unparseable frames count as failure."""
    try:
        state = state_from_observation(np.asarray(obs), goal)
    except (FrameParseError, ValueError, IndexError):
        return False
    return is_success(state)


@dataclass
class CorrelationReport:
    policies: list[str]
    pairs: list[tuple[float, float]]
    pearson_r: float | None
    mmrv: float
    n_episodes: int
    notes: list[str] = field(default_factory=list)

    def aggregate(self) -> dict:
        return {
            "pearson_r": self.pearson_r,
            "mmrv": self.mmrv,
            "n_policies": len(self.pairs),
            "n_episodes": self.n_episodes,
            "policies": [{"policy": p, "real_rate": r, "imagined_rate": s} for p, (r, s) in zip(self.policies, self.pairs)],
        }

    def scatter_rows(self) -> list[dict]:
        return [{"policy_id": p, "real_rate": r, "imagined_rate": s} for p, (r, s) in zip(self.policies, self.pairs)]


def correlation_study(
    predictor,
    policies: Sequence,
    task_seeds: Sequence[int],
    max_chunks: int,
    chunk_size: int,
    width: int = 12,
    height: int = 12,
    capacity: int = 4,
) -> CorrelationReport:
    """Real vs imagined success rate per policy on identical task seeds."""
    from wmeval.rollout import imagined_success_rate, real_success_rate

    if len(policies) < 2:
        raise MetricError("correlation study needs at least two policies")
    pairs = []
    for spec in policies:
        real = real_success_rate(spec, task_seeds, max_chunks, chunk_size, width, height)
        imag = imagined_success_rate(predictor, spec, task_seeds, max_chunks, chunk_size, width, height, capacity)
        pairs.append((real, imag))
    rs, ss = [p[0] for p in pairs], [p[1] for p in pairs]
    notes = []
    try:
        r = pearson(rs, ss)
    except MetricError as exc:
        r = None
        notes.append(str(exc))
    return CorrelationReport([s.name for s in policies], pairs, r, mmrv(rs, ss), len(task_seeds), notes)
