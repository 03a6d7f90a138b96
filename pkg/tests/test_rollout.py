from __future__ import annotations

import numpy as np
import pytest

from wmeval import env, rollout
from wmeval.diffusion import TransitionResult
from wmeval.env import ConfigError, PolicySpec
from wmeval.metrics import FrameDistance, correlation_study
from wmeval.rollout import SimulatorPredictor

W = H = 8
D = 4


class CountingPredictor(SimulatorPredictor):
    def __init__(self):
        self.n = 0

    def predict(self, queries):
        self.n += len(queries)
        return super().predict(queries)


class FrozenPredictor:
    """Returns the current frame unchanged with a fixed progress."""

    def __init__(self, progress=0.0):
        self.progress = progress

    def predict(self, queries):
        return [TransitionResult(q.current.copy(), self.progress, 0) for q in queries]


def test_rollout_lengths_and_expert_success():
    rolls = rollout.imagined_rollouts(SimulatorPredictor(), PolicySpec(), range(10), 12, D, W, H)
    for r in rolls:
        assert len(r.frames) == len(r.actions) + 1 == len(r.progress) + 1
        assert r.terminal_success
        assert r.progress[-1] == 1.0


def test_zero_chunks_is_single_frame():
    r = rollout.imagined_rollout(SimulatorPredictor(), PolicySpec(), 0, 0, D, W, H)
    assert len(r.frames) == 1 and r.actions == [] and not r.terminal_success


def test_missing_progress_counts_as_failure():
    r = rollout.imagined_rollout(FrozenPredictor(None), PolicySpec(), 0, 3, D, W, H)
    assert not r.terminal_success and len(r.actions) == 3


def test_unparseable_frame_aborts_rollout():
    class Blank:
        def predict(self, queries):
            return [TransitionResult(np.zeros_like(q.current), 0.0, 0) for q in queries]

    r = rollout.imagined_rollout(Blank(), PolicySpec(), 1, 5, D, W, H)
    assert not r.terminal_success
    assert r.abort_reason is not None and len(r.actions) == 1


def test_closed_loop_only_sees_the_initial_true_frame(monkeypatch):
    calls = {"reset": 0, "render": 0}
    real_reset, real_render = rollout.reset, rollout.render

    def spy_reset(*a, **k):
        calls["reset"] += 1
        return real_reset(*a, **k)

    def spy_render(*a, **k):
        calls["render"] += 1
        return real_render(*a, **k)

    monkeypatch.setattr(rollout, "reset", spy_reset)
    monkeypatch.setattr(rollout, "render", spy_render)
    r = rollout.imagined_rollout(FrozenPredictor(), PolicySpec("epsilon_noisy", epsilon=0.5), 3, 4, D, W, H)
    assert len(r.actions) == 4
    assert calls == {"reset": 1, "render": 1}


def test_imagined_rate_arithmetic():
    class Alternating:
        def predict(self, queries):
            return [TransitionResult(q.current.copy(), 1.0 if q.instruction and i % 2 == 0 else 0.0, 0) for i, q in enumerate(queries)]

    rate = rollout.imagined_success_rate(Alternating(), PolicySpec(), [0, 1, 2, 3], 1, D, W, H)
    assert rate == 0.5
    with pytest.raises(ConfigError):
        rollout.imagined_success_rate(Alternating(), PolicySpec(), [], 1, D, W, H)


def test_oracle_predictor_matches_real_success():
    seeds = list(range(20))
    for spec in (PolicySpec(), PolicySpec("epsilon_noisy", epsilon=0.6), PolicySpec("mixture", mix_weight=0.3)):
        real = rollout.real_success_rate(spec, seeds, 10, D, W, H)
        imag = rollout.imagined_success_rate(SimulatorPredictor(), spec, seeds, 10, D, W, H)
        assert real == imag


def _subsets():
    test = env.collect_trajectories(PolicySpec(), 6, D, 40, 5, W, H, 1)
    noisy = env.collect_trajectories(PolicySpec("epsilon_noisy", epsilon=0.9), 6, D, 20, 6, W, H)
    return {"D_succ": [t for t in test if t.success], "D_fail": [t for t in noisy if not t.success]}


def test_controllability_oracle_is_exact():
    reps = rollout.controllability_eval(SimulatorPredictor(), _subsets(), FrameDistance(), W, H)
    for rep in reps.values():
        assert rep.delta_dist == 0.0 and rep.dist == 0.0 and rep.mismatch == 0.0
        assert rep.n_transitions == len(rep.rows)


def test_controllability_rejects_empty_subset():
    with pytest.raises(ConfigError):
        rollout.controllability_eval(SimulatorPredictor(), {"D_succ": []}, FrameDistance(), W, H)


def test_progress_agreement_oracle():
    subs = _subsets()
    acc, rows = rollout.progress_agreement(SimulatorPredictor(), subs["D_succ"] + subs["D_fail"], W, H)
    assert acc == 1.0 and len(rows) == len(subs["D_succ"]) + len(subs["D_fail"])


def test_roundtrip_oracle_is_zero():
    rows = rollout.roundtrip_eval(SimulatorPredictor(), [1, 3, 5], [0, 1, 2], D, W, H, FrameDistance())
    assert len(rows) == 9
    assert all(r["distance"] == 0.0 for r in rows)


def test_roundtrip_sources_are_legal():
    s0, acts = rollout.roundtrip_source(4, 5, D, W, H)
    s = s0
    for a in acts:
        assert env.is_legal(s, a)
        s = env.step(s, a)
    assert len(acts) == 5 * D


def test_roundtrip_shares_forward_prefix():
    pred = CountingPredictor()
    rollout.roundtrip_eval(pred, [2, 4], [0, 1], D, W, H, FrameDistance())
    # forward 4 chunks once, backward 2 + 4, per seed
    assert pred.n == 2 * (4 + 2 + 4)


def test_shuffle_eval_properties():
    samples = rollout.teacher_forced_samples(_subsets()["D_succ"], W, H, 4)
    rows = rollout.shuffle_eval(SimulatorPredictor(), samples, [0, 0.25, 0.5, 0.75, 1.0], 0, FrameDistance())
    assert rows[0]["corrupted_delta_dist"] == rows[0]["aligned_delta_dist"] == 0.0
    swapped = [r["n_swapped"] for r in rows]
    assert swapped == sorted(swapped) and swapped[-1] == len(samples)
    curve = [r["corrupted_delta_dist"] for r in rows]
    assert curve == sorted(curve) and curve[-1] > 0


def test_shuffle_eval_errors():
    samples = rollout.teacher_forced_samples(_subsets()["D_succ"], W, H, 4)
    with pytest.raises(ConfigError):
        rollout.shuffle_eval(SimulatorPredictor(), samples[:1], [0.5], 0, FrameDistance())
    with pytest.raises(ConfigError):
        rollout.shuffle_eval(SimulatorPredictor(), samples, [1.5], 0, FrameDistance())


def test_correlation_with_oracle_is_perfect():
    pols = [PolicySpec(), PolicySpec("epsilon_noisy", epsilon=0.6), PolicySpec("mixture", mix_weight=0.3), PolicySpec("mixture", mix_weight=0.0)]
    rep = correlation_study(SimulatorPredictor(), pols, list(range(16)), 10, D, W, H)
    assert len(rep.pairs) == len(pols)
    assert rep.pearson_r == pytest.approx(1.0) and rep.mmrv == 0.0
