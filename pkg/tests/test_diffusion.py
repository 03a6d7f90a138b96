from __future__ import annotations

import numpy as np
import pytest
import torch

from wmeval import diffusion, env, neural, tokens
from wmeval.diffusion import DecodeConfig, decode, unmask_quotas


@pytest.fixture(scope="module")
def vocab():
    return tokens.Vocabulary()


@pytest.fixture(scope="module")
def layout():
    return tokens.make_layout(6, 6, 2, 2)


def _clean(vocab, layout, n=8):
    trajs = env.collect_trajectories(env.PolicySpec("epsilon_noisy", epsilon=0.3), n, 2, 12, 5, 6, 6)
    return diffusion.stack_sequences(trajs, vocab, layout)


def test_schedule_is_identity_on_unit_interval():
    s = diffusion.make_schedule("linear")
    assert np.allclose(s(np.linspace(0, 1, 11)), np.linspace(0, 1, 11))
    with pytest.raises(ValueError):
        diffusion.make_schedule("cosine")


@pytest.mark.parametrize("lam", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_mask_rate_concentrates(lam, vocab):
    layout = tokens.make_layout(12, 12, 4, 4)
    clean = np.zeros((80, layout.length), dtype=np.int64)
    _, mask = diffusion.mask_batch(clean, layout, vocab, lam, diffusion.make_schedule(), np.random.default_rng(1))
    frac = mask[:, layout.context_end :].mean()
    assert mask[:, layout.context_end :].size >= 10_000
    assert abs(frac - lam) <= 0.02
    assert not mask[:, : layout.context_end].any()


def test_mask_never_touches_pad(vocab, layout):
    clean = _clean(vocab, layout)
    clean[:, layout["progress"].offset] = vocab.pad_id
    ids, mask = diffusion.mask_batch(clean, layout, vocab, 1.0, diffusion.make_schedule(), np.random.default_rng(0))
    assert not mask[:, layout["progress"].offset].any()
    assert (ids[:, layout["target"].slice] == vocab.mask_id).all()


def test_mask_forward_sets_flags(vocab, layout):
    clean = _clean(vocab, layout)[0]
    seq = tokens.TokenSequence(clean, layout, np.zeros(layout.length, dtype=bool))
    out = diffusion.mask_forward(seq, 0.5, diffusion.make_schedule(), np.random.default_rng(0), vocab)
    out.check(vocab)
    assert 0 < out.mask_flags.sum() < layout.length - layout.context_end + 1


def test_position_weights(vocab, layout):
    clean = _clean(vocab, layout)
    w = diffusion.position_weights(clean, layout, vocab, 1.0, 2.0)
    assert (w[:, : layout.context_end] == 0).all()
    assert (w[:, layout["target"].slice] == 1.0).all()
    assert (w[:, layout["progress"].offset] == 2.0).all()


def test_trajectory_sequences_cover_every_boundary(vocab):
    layout = tokens.make_layout(8, 8, 2, 4)
    tr = env.run_episode(env.PolicySpec(), 3, 4, 40, 8, 8)
    seqs = diffusion.trajectory_sequences(tr, vocab, layout)
    assert len(seqs) == len(tr.chunks)
    assert tokens.history_indices(seqs[0], vocab) == []
    if len(seqs) > 3:
        assert tokens.history_indices(seqs[3], vocab) == [4, 8]


def test_quotas():
    q = unmask_quotas(145, 16)
    assert sum(q) == 145 and max(q) - min(q) <= 1
    assert unmask_quotas(3, 16).count(1) == 3


class _Scripted:
    """Logits that always favor ``answer`` with per-position confidence ``conf``."""

    def __init__(self, layout, vocab, answer, conf):
        self.layout, self.vocab, self.answer, self.conf = layout, vocab, answer, conf
        self.calls = []

    def logits(self, ids, lam):
        self.calls.append(ids.copy())
        B, L = ids.shape
        out = torch.zeros(B, L, self.vocab.size, dtype=torch.float64)
        out[:, np.arange(L), self.answer] = torch.as_tensor(self.conf)
        out[..., self.vocab.mask_id] = 100.0  # must be suppressed
        return out


def test_decode_commits_by_confidence_and_suppresses_specials(vocab, layout):
    clean = _clean(vocab, layout)[0]
    ids = clean.copy()
    ids[layout.context_end :] = vocab.mask_id
    conf = np.linspace(1, 5, layout.length)
    model = _Scripted(layout, vocab, clean, conf)
    out, _ = decode(model, ids, DecodeConfig(steps=4), vocab, layout)
    assert np.array_equal(out, clean)
    # the second call already has the most confident quarter committed
    n = layout.length - layout.context_end
    second = model.calls[1][0, layout.context_end :]
    committed = np.flatnonzero(second != vocab.mask_id)
    assert len(committed) == -(-n // 4)
    assert committed.min() >= n - len(committed)


def test_decode_is_deterministic(vocab, layout):
    cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=1, n_heads=4)
    model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
    ids = _clean(vocab, layout)[:3]
    ids[:, layout.context_end :] = vocab.mask_id
    a, _ = decode(model, ids, DecodeConfig(steps=5), vocab)
    b, _ = decode(model, ids, DecodeConfig(steps=5), vocab)
    assert np.array_equal(a, b)
    suffix = a[:, layout.context_end :]
    assert not (suffix == vocab.mask_id).any() and not (suffix == vocab.pad_id).any()


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(steps=0)
    with pytest.raises(ValueError):
        DecodeConfig(rule="random")


def test_training_reduces_loss(vocab, layout):
    clean = _clean(vocab, layout, 20)
    cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=2, n_heads=4)
    model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
    opt = neural.AdamW(model, 3e-3)
    rng = np.random.default_rng(0)
    losses = [diffusion.train_step(model, opt, clean[rng.integers(len(clean), size=16)], vocab, diffusion.make_schedule(), rng).loss for _ in range(150)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_training_is_bitwise_reproducible(vocab, layout):
    clean = _clean(vocab, layout, 6)

    def run():
        torch.manual_seed(0)
        cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=1, n_heads=4)
        model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
        opt = neural.AdamW(model, 1e-3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            diffusion.train_step(model, opt, clean[rng.integers(len(clean), size=4)], vocab, diffusion.make_schedule(), rng)
        return [p.detach().clone() for p in model.parameters()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


def test_predict_transition_returns_valid_frame(vocab, layout):
    cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=1, n_heads=4)
    model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
    s = env.reset(0, 6, 6)
    obs, prog = diffusion.predict_transition(
        model, vocab, tokens.KeyframeMemory(2, 2), env.instruction_for(s.goal), env.render(s), (env.NOOP,) * 2, DecodeConfig(steps=3)
    )
    assert obs.shape == (6, 6) and vocab.is_visual(obs).all()
    assert prog is None or prog in env.PROGRESS_LEVELS


class _JointModel:
    """Conditionals of a fixed joint table over a 2-position suffix.

    A masked position gets the marginal of the joint given the other
    position (itself marginalized when also masked).
    """

    def __init__(self, layout, vocab, table):
        self.layout, self.vocab, self.table = layout, vocab, table

    def logits(self, ids, lam):
        B, L = ids.shape
        out = torch.full((B, L, self.vocab.size), -1e9, dtype=torch.float64)
        p0, p1 = self.layout.context_end, self.layout.context_end + 1
        for b in range(B):
            joint = self.table[b]
            a, c = ids[b, p0], ids[b, p1]
            m0 = joint[:, c].copy() if c < 4 else joint.sum(1)
            m1 = joint[a, :].copy() if a < 4 else joint.sum(0)
            out[b, p0, :4] = torch.as_tensor(np.log(m0 / m0.sum()))
            out[b, p1, :4] = torch.as_tensor(np.log(m1 / m1.sum()))
        return out


def test_greedy_decode_matches_exhaustive_search_on_micro_problem(vocab):
    # a 2-position target: 1x1 frame plus the progress slot, symbols 0..3
    layout = tokens.make_layout(1, 1, 0, 2)
    rng = np.random.default_rng(0)
    n = 400
    tables = np.exp(3.0 * rng.standard_normal((n, 4, 4)))
    ids = np.zeros((n, layout.length), dtype=np.int64)
    ids[:, layout.context_end :] = vocab.mask_id
    out, _ = decode(_JointModel(layout, vocab, tables), ids, DecodeConfig(steps=2), vocab, layout)
    got = out[:, layout.context_end :]
    best = np.array([np.unravel_index(np.argmax(t), t.shape) for t in tables])
    agree = np.mean((got == best).all(axis=1))
    assert agree >= 0.95
