from __future__ import annotations

import numpy as np
import pytest
import torch

from wmeval import env, neural, tokens
from wmeval.diffusion import make_loss_batch, make_schedule
from wmeval.neural import CheckpointError, InputError, ModelConfig, WorldModelNet
from wmeval.oracles import gradient_oracle, loss_limit_oracle


@pytest.fixture(scope="module")
def setup():
    vocab = tokens.Vocabulary()
    layout = tokens.make_layout(6, 6, 2, 2)
    cfg = ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=2, n_heads=4, seed=3)
    return vocab, layout, cfg


def _ids(vocab, layout, seed=0, target=False):
    s = env.reset(seed, 6, 6)
    chunk = (env.Action(1, 0), env.Action(0, 1))
    nxt = s
    for a in chunk:
        nxt = env.step(nxt, a)
    return tokens.build_sequence(
        vocab, layout, tokens.KeyframeMemory(2, 2), env.instruction_for(s.goal), env.render(s), chunk,
        env.render(nxt) if target else None, env.oracle_progress(nxt) if target else None,
    ).ids


def test_init_is_deterministic(setup):
    vocab, layout, cfg = setup
    a, b = WorldModelNet(cfg, layout, vocab.pad_id), WorldModelNet(cfg, layout, vocab.pad_id)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert sum(p.numel() for p in a.parameters()) == cfg.parameter_count()


def test_chunk_bias_depends_on_action_order(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    with torch.no_grad():
        model.cond.weight.normal_(generator=torch.Generator().manual_seed(0))
    ids = torch.as_tensor(_ids(vocab, layout))[None]
    swapped = ids.clone()
    acts = layout["actions"].slice
    swapped[0, acts] = ids[0, acts].flip(0)
    assert not torch.equal(model.chunk_bias(ids), model.chunk_bias(swapped))
    with pytest.raises(ValueError):
        WorldModelNet(cfg, tokens.make_layout(6, 6, 2, 3), vocab.pad_id)


def test_forward_shapes_and_input_checks(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    ids = _ids(vocab, layout)
    out = neural.forward(model, ids, 1.0)
    assert out.shape == (layout.length, vocab.size)
    assert torch.isfinite(out).all()
    with pytest.raises(InputError):
        neural.forward(model, ids[:-1])
    bad = ids.copy()
    bad[0] = vocab.size
    with pytest.raises(InputError):
        neural.forward(model, bad)


def test_action_token_changes_target_logits(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    a = _ids(vocab, layout)
    b = a.copy()
    b[layout["actions"].offset] = vocab.action_id(env.Action(-1, -1))
    la, lb = neural.forward(model, a, 1.0), neural.forward(model, b, 1.0)
    tgt = layout["target"].slice
    assert not torch.allclose(la[tgt], lb[tgt])


def test_pad_content_never_reaches_logits(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    ids = _ids(vocab, layout)
    ids[layout.context_end :] = vocab.pad_id
    base = neural.forward(model, ids, 0.5)
    pad_mask = torch.as_tensor(ids == vocab.pad_id)[None]
    other = torch.as_tensor(ids)[None].clone()
    other[0, layout.context_end :] = 3  # arbitrary content, still flagged as PAD
    out = model(other, torch.tensor([0.5]), pad_mask)[0]
    ctx = slice(0, layout.context_end)
    assert torch.allclose(base[ctx], out[ctx], atol=1e-6)


def test_gradient_matches_finite_differences():
    gradient_oracle(n_samples=20)


def test_gradient_oracle_catches_mutation():
    from wmeval.oracles import OracleFailure

    with pytest.raises(OracleFailure):
        gradient_oracle(n_samples=5, mutate=True)


def test_loss_limit_is_mean_target_cross_entropy():
    loss_limit_oracle()


def test_empty_mask_contributes_zero(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    clean = _ids(vocab, layout, target=True)[None]
    batch = make_loss_batch(clean, layout, vocab, np.zeros(1), make_schedule(), np.random.default_rng(0))
    assert not batch.mask.any()
    loss, grads = neural.loss_and_grad(model, batch)
    assert loss == 0.0


def test_nonfinite_gradient_names_parameter(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    opt = neural.AdamW(model, 1e-3)
    grads = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    grads["head.weight"][0, 0] = float("nan")
    with pytest.raises(neural.TrainingError, match="head.weight"):
        opt.step(grads)


def test_adamw_single_step_matches_closed_form(setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    grads = {n: torch.full_like(p, 0.5) for n, p in model.named_parameters()}
    opt = neural.AdamW(model, lr=0.1, weight_decay=0.0)
    opt.step(grads)
    # first bias-corrected step is -lr * sign(g) up to eps
    for n, p in model.named_parameters():
        assert torch.allclose(p, before[n] - 0.1, atol=1e-5), n


def test_checkpoint_round_trip(tmp_path, setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    opt = neural.AdamW(model, 1e-3)
    opt.step({n: torch.ones_like(p) for n, p in model.named_parameters()})
    path = tmp_path / "m.ckpt"
    neural.save_checkpoint(path, model, vocab, opt, {"step": 1})
    back, v2, header, opt2 = neural.load_checkpoint(path)
    assert v2.hash() == vocab.hash() and header["extra"]["step"] == 1
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(p, q), n
    assert opt2.step_count == 1 and torch.equal(opt2.m["head.weight"], opt.m["head.weight"])
    size = path.stat().st_size
    assert size <= 2 * 3 * 4 * cfg.parameter_count() + 65536


def test_checkpoint_corruption_detected(tmp_path, setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    path = tmp_path / "m.ckpt"
    neural.save_checkpoint(path, model, vocab)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        neural.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError):
        neural.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XX" + bytes(raw[2:]))
    with pytest.raises(CheckpointError, match="magic"):
        neural.load_checkpoint(tmp_path / "magic.ckpt")


def test_float64_build_loads_from_float32_checkpoint(tmp_path, setup):
    vocab, layout, cfg = setup
    model = WorldModelNet(cfg, layout, vocab.pad_id)
    neural.save_checkpoint(tmp_path / "m.ckpt", model, vocab)
    m64, *_ = neural.load_checkpoint(tmp_path / "m.ckpt", dtype="float64")
    assert m64.head.weight.dtype == torch.float64
