from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmeval import env, tokens
from wmeval.tokens import ContractError, DecodeError, KeyframeMemory, Vocabulary


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


def test_vocabulary_ranges_are_disjoint(vocab):
    assert vocab.size == 16 + 27 + 5 + 10 + 6 + 4
    assert len(set(vocab.symbols)) == vocab.size
    ids = {vocab.action_id(a) for a in env.ACTIONS}
    assert len(ids) == 27
    assert vocab.is_visual(np.arange(16)).all() and not vocab.is_visual(vocab.mask_id)


def test_vocabulary_hash_is_stable(vocab):
    assert vocab.hash() == Vocabulary().hash()
    assert vocab.hash() != Vocabulary(words=("move", "to", "mark", "red", "green")).hash()


def test_pool_majority_ties_go_to_smallest_code():
    assert tokens.pool_majority(np.array([[0, 0], [3, 3]]))[0, 0] == 0
    assert tokens.pool_majority(np.array([[3, 3], [3, 0]]))[0, 0] == 3
    assert tokens.pool_majority(np.array([[4, 2], [9, 7]]))[0, 0] == 2


def test_pool_majority_exhaustive_small_palette():
    for block in itertools.product(range(5), repeat=4):
        counts = {c: block.count(c) for c in block}
        top = max(counts.values())
        want = min(c for c, n in counts.items() if n == top)
        assert tokens.pool_majority(np.array(block).reshape(2, 2))[0, 0] == want


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_observation_round_trip(seed):
    vocab = Vocabulary()
    obs = env.render(env.reset(seed))
    back = tokens.detokenize_observation(tokens.tokenize_observation(obs), 12, 12, vocab)
    assert np.array_equal(obs, back)
    assert tokens.tokenize_observation(obs, "low").size == 36


def test_detokenize_rejects_non_visual(vocab):
    ids = np.zeros(16, dtype=np.int64)
    ids[5] = vocab.mask_id
    with pytest.raises(DecodeError) as info:
        tokens.detokenize_observation(ids, 4, 4, vocab)
    assert info.value.position == 5


def test_chunk_round_trip_and_contract(vocab):
    chunk = tuple(env.ACTIONS[i] for i in (0, 5, 13, 26))
    ids = tokens.tokenize_chunk(chunk, vocab, 4)
    assert tokens.detokenize_chunk(ids, vocab) == chunk
    with pytest.raises(ContractError):
        tokens.tokenize_chunk(chunk[:3], vocab, 4)
    with pytest.raises(DecodeError):
        tokens.detokenize_chunk([vocab.mask_id], vocab)


def test_progress_tokens(vocab):
    for p in env.PROGRESS_LEVELS:
        assert tokens.detokenize_progress(tokens.tokenize_progress(p, vocab), vocab) == p
    assert tokens.detokenize_progress(vocab.mask_id, vocab) is None
    with pytest.raises(ValueError):
        vocab.progress_id(0.5)


def test_keyframe_memory_stride_and_eviction():
    obs = env.render(env.reset(0))
    mem = KeyframeMemory(2, 4)
    for t in (0, 4, 8):
        mem = tokens.push_keyframe(mem, t, obs)
    assert mem.indices == [4, 8]
    with pytest.raises(ContractError):
        tokens.push_keyframe(mem, 13, obs)


def test_default_layout_lengths():
    layout = tokens.make_layout(12, 12, 4, 4)
    assert layout["history"].length == 4 * (4 + 36)
    assert layout["current"].length == 144
    assert layout["actions"].length == 4
    assert layout["target"].length == 144
    assert layout["progress"].length == 1
    assert layout.length == 1 + 160 + 4 + 144 + 4 + 1 + 144 + 1
    assert tokens.SequenceLayout.from_descriptor(layout.descriptor()) == layout


def test_position_tables_share_grid_ids():
    layout = tokens.make_layout(8, 8, 2, 4)
    t = layout.position_tables()
    cur, tgt = layout["current"].slice, layout["target"].slice
    assert np.array_equal(t["row"][cur], t["row"][tgt])
    assert np.array_equal(t["col"][cur], t["col"][tgt])
    assert t["row"][layout["sep"].offset] == 8


def _sequence(vocab, pad_policy="front", n_mem=2, target=True):
    layout = tokens.make_layout(8, 8, 4, 4)
    s = env.reset(1, 8, 8)
    mem = KeyframeMemory(4, 4)
    for k in range(n_mem):
        mem = tokens.push_keyframe(mem, 4 * k, env.render(s))
    chunk = (env.NOOP,) * 4
    obs = env.render(s)
    seq = tokens.build_sequence(
        vocab, layout, mem, env.instruction_for(s.goal), obs, chunk,
        obs if target else None, 0.0 if target else None, pad_policy,
    )
    return seq


def test_build_sequence_front_padding(vocab):
    seq = _sequence(vocab)
    seq.check(vocab)
    assert tokens.history_indices(seq, vocab) == [0, 4]
    layout = seq.layout
    first_slot = seq.ids[layout["history"].offset : layout["history"].offset + layout.slot_length]
    assert (first_slot == vocab.pad_id).all()


def test_build_sequence_drop_policy_only_touches_history(vocab):
    full, dropped = _sequence(vocab), _sequence(vocab, "drop")
    hist = full.layout["history"].slice
    assert (dropped.ids[hist] == vocab.pad_id).all()
    rest = np.ones(full.layout.length, dtype=bool)
    rest[hist] = False
    assert np.array_equal(full.ids[rest], dropped.ids[rest])


def test_build_sequence_masks_suffix_without_target(vocab):
    seq = _sequence(vocab, target=False)
    layout = seq.layout
    assert (seq.ids[layout.context_end :] == vocab.mask_id).all()
    assert seq.mask_flags.sum() == layout.length - layout.context_end
    seq.check(vocab)


def test_build_sequence_rejects_bad_instruction(vocab):
    layout = tokens.make_layout(8, 8, 4, 4)
    obs = env.render(env.reset(1, 8, 8))
    with pytest.raises(ContractError):
        tokens.build_sequence(vocab, layout, KeyframeMemory(4, 4), "move red", obs, (env.NOOP,) * 4)
