"""Bidirectional transformer over unified token sequences, plus its training loss,
optimizer and checkpoint format.

torch supplies tensors and reverse-mode autodiff; the network, the weighted
masked-diffusion loss, the AdamW update and the on-disk format live here.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from wmeval.io import atomic_write_bytes
from wmeval.tokens import SEGMENT_KINDS, SequenceLayout, Vocabulary

MAGIC = b"MDDWM1"

# action-conditioned attention bias: gain on its parameters, and the initial
# constant and curvature terms (a Gaussian centred on "same cell")
COND_GAIN = 8.0
COND_INIT_CONST = 3.0
COND_INIT_CURV = 0.5


class InputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ff_mult: int = 4
    n_segments: int = len(SEGMENT_KINDS)
    n_rows: int = 13
    n_cols: int = 13
    chunk_size: int = 4
    init_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @classmethod
    def for_layout(cls, vocab: Vocabulary, layout: SequenceLayout, **kw) -> "ModelConfig":
        return cls(
            vocab_size=vocab.size,
            max_len=layout.length,
            n_rows=layout.height + 1,
            n_cols=layout.width + 1,
            chunk_size=layout.chunk_size,
            **kw,
        )

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def parameter_count(self) -> int:
        d, V = self.d_model, self.vocab_size
        emb = (V + self.max_len + self.n_segments + self.n_rows + self.n_cols + 2) * d
        attn = d * 3 * d + 3 * d + d * d + d
        ff = d * self.ff_mult * d + self.ff_mult * d + self.ff_mult * d * d + d
        block = attn + ff + 4 * d
        cond = (self.chunk_size * V + 1) * self.n_heads * 4
        return V * d + emb + cond + self.n_layers * block + 2 * d + d * V + V


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, ff_mult * d)
        self.fc2 = nn.Linear(ff_mult * d, d)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(B, L, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        x = x + self.proj(a.transpose(1, 2).reshape(B, L, d))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def grid_features(n: int, d: int, half: int) -> torch.Tensor:
    """Coordinate features for ``n - 1`` cells plus a zero null row.

    Rows fill the first half of the channels and columns the second half. The
    first channel of each half is a linear ramp, so ``cell + offset`` is a
    sum the network can compute; the rest are sin/cos pairs.
    """
    out = torch.zeros(n, d, dtype=torch.float64)
    h = d // 2
    lo = half * h
    pos = torch.arange(n - 1, dtype=torch.float64)
    out[: n - 1, lo] = 2.0 * pos / max(n - 2, 1) - 1.0
    n_freq = (h - 1) // 2
    if n_freq:
        k = torch.arange(n_freq, dtype=torch.float64)
        period = 2.0 * (n - 1) ** (k / max(n_freq - 1, 1)) + 1.0
        ang = 2.0 * math.pi * pos[:, None] / period
        out[: n - 1, lo + 1 : lo + 1 + n_freq] = torch.sin(ang) / math.sqrt(n_freq)
        out[: n - 1, lo + 1 + n_freq : lo + 1 + 2 * n_freq] = torch.cos(ang) / math.sqrt(n_freq)
    return out


def locality_bias(rows, cols, n_rows: int, n_cols: int, n_heads: int) -> torch.Tensor:
    """Fixed ``[n_heads, L, L]`` attention bias: minus slope times the Manhattan
    cell distance between two grid tokens, zero when either is not a grid
    token. Head 0 has slope 0; the others halve from 2."""
    r = torch.as_tensor(np.asarray(rows), dtype=torch.float64)
    c = torch.as_tensor(np.asarray(cols), dtype=torch.float64)
    grid = (r < n_rows - 1) & (c < n_cols - 1)
    dist = (r[:, None] - r[None, :]).abs() + (c[:, None] - c[None, :]).abs()
    dist = torch.where(grid[:, None] & grid[None, :], dist, torch.zeros_like(dist))
    slopes = torch.tensor([0.0] + [2.0 ** (1 - h) for h in range(n_heads - 1)], dtype=torch.float64)
    return -slopes[:, None, None] * dist


def offset_features(rows, cols, target, current) -> torch.Tensor:
    """``[T, C, 4]`` features of the offset from each current cell to each
    target cell: constant, row offset, column offset, minus half the squared
    length."""
    r = torch.as_tensor(np.asarray(rows), dtype=torch.float64)
    c = torch.as_tensor(np.asarray(cols), dtype=torch.float64)
    ts = slice(target.offset, target.offset + target.length)
    cs = slice(current.offset, current.offset + current.length)
    dr = r[ts][:, None] - r[cs][None, :]
    dc = c[ts][:, None] - c[cs][None, :]
    return torch.stack([torch.ones_like(dr), dr, dc, -(dr * dr + dc * dc) / 2], dim=-1)


class WorldModelNet(nn.Module):
    """p_theta: logits over the vocabulary at every position.

    Attention is fully bidirectional; PAD positions are dropped as keys and
    their token embeddings are zeroed, so PAD content never reaches a logit.
    The masking level enters as an embedding interpolated between two learned
    endpoints and added at every position.
    """

    def __init__(self, config: ModelConfig, layout: SequenceLayout, pad_id: int):
        super().__init__()
        if layout.length > config.max_len:
            raise ValueError("layout longer than max_len")
        if layout.chunk_size != config.chunk_size:
            raise ValueError(f"layout chunk size {layout.chunk_size} != config chunk_size {config.chunk_size}")
        self.config = config
        self.layout = layout
        self.pad_id = pad_id
        d = config.d_model
        self.tok = nn.Embedding(config.vocab_size, d)
        self.pos = nn.Embedding(config.max_len, d)
        self.seg = nn.Embedding(config.n_segments, d)
        self.row = nn.Embedding(config.n_rows, d)
        self.col = nn.Embedding(config.n_cols, d)
        self.lam = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.ff_mult) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)
        tables = layout.position_tables()
        L = layout.length
        self.register_buffer("seg_ids", torch.as_tensor(tables["segment"]), persistent=False)
        self.register_buffer("row_ids", torch.as_tensor(tables["row"]), persistent=False)
        self.register_buffer("col_ids", torch.as_tensor(tables["col"]), persistent=False)
        self.register_buffer("pos_ids", torch.arange(L), persistent=False)
        self.register_buffer(
            "grid_bias", locality_bias(tables["row"], tables["col"], config.n_rows, config.n_cols, config.n_heads).to(config.torch_dtype), persistent=False
        )
        # target cell i also receives the current frame's token at cell i
        cur, tgt = layout["current"], layout["target"]
        self.carry = nn.Embedding(config.vocab_size, d)
        self.register_buffer("carry_src", torch.arange(cur.offset, cur.offset + cur.length), persistent=False)
        self.register_buffer("carry_dst", torch.arange(tgt.offset, tgt.offset + tgt.length), persistent=False)
        # indexed by (slot in chunk, token) so each head can track a partial displacement
        self.cond = nn.Embedding(config.chunk_size * config.vocab_size, config.n_heads * 4)
        self.register_buffer("cond_slot", torch.arange(config.chunk_size) * config.vocab_size, persistent=False)
        self.cond_base = nn.Parameter(torch.zeros(config.n_heads * 4))
        self.register_buffer("cond_feat", offset_features(tables["row"], tables["col"], tgt, cur).to(config.torch_dtype), persistent=False)
        self.to(config.torch_dtype)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.seed)
        std = self.config.init_scale / math.sqrt(self.config.d_model)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(".bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
            self.cond.weight.zero_()
            base = self.cond_base.view(self.config.n_heads, 4)
            base.zero_()
            base[:, 0] = COND_INIT_CONST / COND_GAIN
            base[:, 3] = COND_INIT_CURV / COND_GAIN
            # grid coordinates start from Fourier features so that a fixed
            # offset is a linear map on the embedding
            d = self.config.d_model
            self.row.weight.copy_(grid_features(self.config.n_rows, d, 0))
            self.col.weight.copy_(grid_features(self.config.n_cols, d, 1))

    def chunk_bias(self, ids: torch.Tensor) -> torch.Tensor:
        """``[B, H, L, L]`` first-layer bias from target to current-frame cells.

        Per head, the chunk's action tokens (keyed by slot) sum to coefficients
        ``psi`` on the offset features ``(1, dr, dc, -(dr^2 + dc^2) / 2)``, i.e.
        a Gaussian over source cells whose centre the actions can move.
        """
        B, L = ids.shape
        H = self.config.n_heads
        acts = self.layout["actions"]
        psi = COND_GAIN * (self.cond(ids[:, acts.offset : acts.offset + acts.length] + self.cond_slot).sum(1) + self.cond_base)
        block = torch.einsum("bhf,tcf->bhtc", psi.view(B, H, 4), self.cond_feat)
        out = torch.zeros(B, H, L, L, dtype=block.dtype)
        tgt, cur = self.layout["target"], self.layout["current"]
        out[:, :, tgt.offset : tgt.offset + tgt.length, cur.offset : cur.offset + cur.length] = block
        return out

    def lambda_embedding(self, lam: torch.Tensor) -> torch.Tensor:
        lam = lam.to(self.lam.weight.dtype)[:, None]
        return (1.0 - lam) * self.lam.weight[0] + lam * self.lam.weight[1]

    def forward(self, ids: torch.Tensor, lam: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if ids.dim() != 2 or ids.shape[1] != self.layout.length:
            raise InputError(f"expected ids of shape (B, {self.layout.length}), got {tuple(ids.shape)}")
        if int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size:
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        if pad_mask is None:
            pad_mask = ids == self.pad_id
        keep = ~pad_mask
        dtype = self.tok.weight.dtype
        key_bias = torch.zeros(keep.shape, dtype=dtype).masked_fill(~keep, float("-inf"))
        bias = self.grid_bias[None] + key_bias[:, None, None, :]
        x = self.tok(ids) * keep[..., None].to(dtype)
        x = x.index_add(1, self.carry_dst, self.carry(ids[:, self.carry_src]))
        first = bias + self.chunk_bias(ids)
        x = x + self.pos(self.pos_ids) + self.seg(self.seg_ids) + self.row(self.row_ids) + self.col(self.col_ids)
        x = x + self.lambda_embedding(lam)[:, None, :]
        for i, blk in enumerate(self.blocks):
            x = blk(x, first if i == 0 else bias)
        return self.head(self.ln_f(x))

    @torch.no_grad()
    def logits(self, ids: np.ndarray, lam: np.ndarray) -> torch.Tensor:
        self.eval()
        return self(torch.as_tensor(ids, dtype=torch.long), torch.as_tensor(lam, dtype=self.config.torch_dtype))


def forward(model: WorldModelNet, ids, lam=None) -> torch.Tensor:
    """Logits ``[B, L, V]`` (or ``[L, V]`` for a single sequence)."""
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    single = ids.dim() == 1
    if single:
        ids = ids[None]
    if lam is None:
        lam = torch.zeros(ids.shape[0])
    lam = torch.as_tensor(lam, dtype=model.config.torch_dtype).reshape(-1)
    out = model(ids, lam)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBatch:
    """One batch for the weighted masked-reconstruction loss.

    ``ids`` is the corrupted input, ``clean`` the uncorrupted sequence,
    ``mask`` marks the reconstructed positions, ``weights`` the per-position
    rebalancing weights, ``lam`` the realized masked fraction fed to the
    network, ``m_lam`` the schedule value m(lambda) used for normalization and
    ``n_target`` the count of non-PAD suffix positions.
    """

    ids: np.ndarray
    clean: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    lam: np.ndarray
    m_lam: np.ndarray
    n_target: np.ndarray


def weighted_loss(logits: torch.Tensor, batch: LossBatch) -> torch.Tensor:
    dtype = logits.dtype
    clean = torch.as_tensor(batch.clean, dtype=torch.long)
    mask = torch.as_tensor(batch.mask, dtype=torch.bool)
    w = torch.as_tensor(batch.weights, dtype=dtype) * mask.to(dtype)
    ce = -torch.log_softmax(logits, dim=-1).gather(-1, clean[..., None])[..., 0]
    norm = torch.as_tensor(batch.m_lam, dtype=dtype).clamp_min(1e-12) * torch.as_tensor(batch.n_target, dtype=dtype)
    per_sample = (ce * w).sum(dim=1) / norm
    per_sample = torch.where(mask.any(dim=1), per_sample, torch.zeros_like(per_sample))
    return per_sample.mean()


def loss_and_grad(model: WorldModelNet, batch: LossBatch) -> tuple[float, dict[str, torch.Tensor]]:
    model.train()
    model.zero_grad(set_to_none=True)
    logits = model(torch.as_tensor(batch.ids, dtype=torch.long), torch.as_tensor(batch.lam, dtype=model.config.torch_dtype))
    loss = weighted_loss(logits, batch)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    return float(loss.detach()), grads


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Bias-corrected Adam with decoupled weight decay on matrices."""

    def __init__(self, model: nn.Module, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.params = dict(model.named_parameters())
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor], lr: float | None = None) -> None:
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {name}")
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if self.weight_decay and p.dim() >= 2:
                p.mul_(1.0 - lr * self.weight_decay)
            p.addcdiv_(m / c1, (v / c2).sqrt().add_(self.eps), value=-lr)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
        }


def optimizer_step(model: nn.Module, grads: dict[str, torch.Tensor], state: AdamW, lr: float | None = None) -> AdamW:
    state.step(grads, lr)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _vocab_meta(vocab: Vocabulary) -> dict:
    return {"palette_size": vocab.palette_size, "words": list(vocab.words)}


def save_checkpoint(
    path: str | Path,
    model: WorldModelNet,
    vocab: Vocabulary,
    optimizer: AdamW | None = None,
    extra: dict | None = None,
) -> None:
    """Write ``MAGIC | u32 header length | UTF-8 JSON header | float32 LE buffers``.

    Buffers follow parameter declaration order; optimizer moments (first,
    then second) follow the parameters when an optimizer is given.
    """
    tensors = [p.detach() for _, p in model.named_parameters()]
    if optimizer is not None:
        tensors += [optimizer.m[k] for k in optimizer.params] + [optimizer.v[k] for k in optimizer.params]
    payload = b"".join(t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for t in tensors)
    header = {
        "format": 1,
        "config": asdict(model.config),
        "vocab": _vocab_meta(vocab),
        "vocab_hash": vocab.hash(),
        "layout": model.layout.descriptor(),
        "params": [[n, list(p.shape)] for n, p in model.named_parameters()],
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(head)) + head + payload)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read(len(MAGIC) + 4)
        if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<I", data[len(MAGIC) :])
        head = fh.read(n)
    if len(head) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc


def load_checkpoint(path: str | Path, dtype: str | None = None):
    """Returns ``(model, vocab, header, optimizer_or_None)``."""
    raw = Path(path).read_bytes()
    header = read_header(path)
    start = len(MAGIC) + 4 + struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])[0]
    payload = raw[start:]
    vocab = Vocabulary(header["vocab"]["palette_size"], header["vocab"]["words"])
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch ({header['vocab_hash']} vs {vocab.hash()})")
    n_params = sum(int(np.prod(shape)) for _, shape in header["params"])
    n_total = n_params * (3 if header["optimizer"] else 1)
    if len(payload) != 4 * n_total:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {4 * n_total}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    cfg = dict(header["config"])
    if dtype is not None:
        cfg["dtype"] = dtype
    config = ModelConfig(**cfg)
    layout = SequenceLayout.from_descriptor(header["layout"])
    model = WorldModelNet(config, layout, vocab.pad_id)
    flat = np.frombuffer(payload, dtype="<f4")
    named = dict(model.named_parameters())
    if [n for n, _ in header["params"]] != list(named):
        raise CheckpointError(f"{path}: parameter manifest does not match the model")
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = flat[off : off + n].reshape(shape)
        off += n
        return torch.from_numpy(arr.copy()).to(config.torch_dtype)

    with torch.no_grad():
        for name, shape in header["params"]:
            named[name].copy_(take(shape))
    optimizer = None
    if header["optimizer"]:
        o = header["optimizer"]
        optimizer = AdamW(model, o["lr"], o["betas"], o["eps"], o["weight_decay"])
        optimizer.step_count = o["step_count"]
        for name, shape in header["params"]:
            optimizer.m[name].copy_(take(shape))
        for name, shape in header["params"]:
            optimizer.v[name].copy_(take(shape))
    return model, vocab, header, optimizer
