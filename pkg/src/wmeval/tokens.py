"""Unified discrete token space and sequence assembly.

A training/inference sequence is laid out as::

    [BOS] [history: K x (frame-index digits + low-res frame)] [instruction]
    [current frame] [action chunk] [SEP] [target frame] [progress]

Everything up to and including SEP is context; the target frame and the
progress token form the suffix that gets masked and reconstructed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from wmeval.env import ACTIONS, PALETTE_SIZE, PROGRESS_LEVELS, Action, ActionChunk, Observation

INSTRUCTION_WORDS = ("move", "to", "mark", "red", "blue")
INDEX_DIGITS = 4
SPECIALS = ("<mask>", "<pad>", "<sep>", "<bos>")


class DecodeError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (position {position})")
        self.position = position


class ContractError(ValueError):
    pass


def progress_str(level: float) -> str:
    return f"{level:.1f}"


class Vocabulary:
    """Disjoint id ranges: visual codes, action triples, text, progress, specials."""

    def __init__(self, palette_size: int = PALETTE_SIZE, words: Sequence[str] = INSTRUCTION_WORDS):
        self.palette_size = palette_size
        self.words = tuple(words)
        symbols = [f"v{c}" for c in range(palette_size)]
        self.action_offset = len(symbols)
        symbols += [f"a({a.dx:+d},{a.dy:+d},{a.grip.name.lower()})" for a in ACTIONS]
        self.word_offset = len(symbols)
        symbols += [f"w:{w}" for w in self.words]
        self.digit_offset = len(symbols)
        symbols += [f"d:{i}" for i in range(10)]
        self.progress_offset = len(symbols)
        symbols += [f"p:{progress_str(p)}" for p in PROGRESS_LEVELS]
        self.special_offset = len(symbols)
        symbols += list(SPECIALS)
        self.symbols = tuple(symbols)
        self.mask_id, self.pad_id, self.sep_id, self.bos_id = range(self.special_offset, len(symbols))
        self._action_index = {a: i for i, a in enumerate(ACTIONS)}

    @property
    def size(self) -> int:
        return len(self.symbols)

    def symbol(self, token_id: int) -> str:
        return self.symbols[token_id]

    def is_visual(self, token_id) -> np.ndarray:
        return (np.asarray(token_id) >= 0) & (np.asarray(token_id) < self.palette_size)

    def action_id(self, action: Action) -> int:
        return self.action_offset + self._action_index[action]

    def word_id(self, word: str) -> int:
        try:
            return self.word_offset + self.words.index(word)
        except ValueError:
            raise KeyError(f"unknown instruction word {word!r}") from None

    def digit_id(self, digit: int) -> int:
        return self.digit_offset + digit

    def progress_id(self, level: float) -> int:
        idx = int(round(level * 5))
        if not (0 <= idx < len(PROGRESS_LEVELS) and math.isclose(PROGRESS_LEVELS[idx], level, abs_tol=1e-9)):
            raise ValueError(f"invalid progress level {level}")
        return self.progress_offset + idx

    def manifest(self) -> str:
        return "".join(f"{i}\t{s}\n" for i, s in enumerate(self.symbols))

    def hash(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# observations, actions, progress


def lowres_shape(height: int, width: int) -> tuple[int, int]:
    return (math.ceil(height / 2), math.ceil(width / 2))


def pool_majority(obs: Observation) -> np.ndarray:
    """2x2 majority pooling; ties go to the smallest code. Edge blocks may be partial."""
    obs = np.asarray(obs)
    h, w = obs.shape
    lh, lw = lowres_shape(h, w)
    out = np.empty((lh, lw), dtype=np.int64)
    for r in range(lh):
        for c in range(lw):
            block = obs[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].reshape(-1)
            counts = np.bincount(block)
            out[r, c] = int(np.argmax(counts))  # argmax returns the first maximum
    return out


def tokenize_observation(obs: Observation, resolution: str = "full") -> np.ndarray:
    obs = np.asarray(obs, dtype=np.int64)
    if resolution == "full":
        return obs.reshape(-1).copy()
    if resolution == "low":
        return pool_majority(obs).reshape(-1)
    raise ValueError(f"unknown resolution {resolution!r}")


def detokenize_observation(tokens, height: int, width: int, vocab: Vocabulary) -> Observation:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size != height * width:
        raise DecodeError(f"expected {height * width} visual tokens, got {tokens.size}")
    bad = np.flatnonzero(~vocab.is_visual(tokens))
    if bad.size:
        pos = int(bad[0])
        raise DecodeError(f"non-visual id {int(tokens[pos])} ({vocab.symbol(int(tokens[pos]))})", pos)
    return tokens.reshape(height, width).copy()


def tokenize_chunk(chunk: Sequence[Action], vocab: Vocabulary, chunk_size: int | None = None) -> np.ndarray:
    if chunk_size is not None and len(chunk) != chunk_size:
        raise ContractError(f"chunk has {len(chunk)} actions, expected {chunk_size}")
    return np.array([vocab.action_id(a) for a in chunk], dtype=np.int64)


def detokenize_chunk(ids, vocab: Vocabulary) -> ActionChunk:
    out = []
    for pos, t in enumerate(np.asarray(ids).reshape(-1)):
        k = int(t) - vocab.action_offset
        if not 0 <= k < len(ACTIONS):
            raise DecodeError(f"non-action id {int(t)}", pos)
        out.append(ACTIONS[k])
    return tuple(out)


def tokenize_progress(level: float, vocab: Vocabulary) -> int:
    return vocab.progress_id(level)


def detokenize_progress(token_id: int, vocab: Vocabulary) -> float | None:
    k = int(token_id) - vocab.progress_offset
    if 0 <= k < len(PROGRESS_LEVELS):
        return PROGRESS_LEVELS[k]
    return None


def tokenize_instruction(instruction: str, vocab: Vocabulary) -> np.ndarray:
    return np.array([vocab.word_id(w) for w in instruction.split()], dtype=np.int64)


def index_digits(index: int, n_digits: int = INDEX_DIGITS) -> list[int]:
    if not 0 <= index < 10**n_digits:
        raise ContractError(f"frame index {index} does not fit in {n_digits} digits")
    return [int(ch) for ch in f"{index:0{n_digits}d}"]


# ---------------------------------------------------------------------------
# keyframe memory


@dataclass(frozen=True)
class KeyframeMemory:
    capacity: int = 4
    stride: int = 4
    entries: tuple[tuple[int, np.ndarray], ...] = ()

    def __post_init__(self):
        if len(self.entries) > self.capacity:
            raise ContractError("memory holds more entries than its capacity")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]


def push_keyframe(mem: KeyframeMemory, frame_index: int, obs: Observation) -> KeyframeMemory:
    if mem.entries:
        expected = mem.entries[-1][0] + mem.stride
        if frame_index != expected:
            raise ContractError(f"frame index {frame_index} breaks the stride; expected {expected}")
    elif frame_index < 0:
        raise ContractError("frame index must be non-negative")
    entries = mem.entries + ((frame_index, tokenize_observation(obs, "low")),)
    return KeyframeMemory(mem.capacity, mem.stride, entries[-mem.capacity :])


# ---------------------------------------------------------------------------
# layout


SEGMENT_KINDS = (
    "bos",
    "history_index",
    "history_frame",
    "instruction",
    "current",
    "actions",
    "sep",
    "target",
    "progress",
)


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class SequenceLayout:
    width: int
    height: int
    capacity: int
    chunk_size: int
    n_words: int
    n_digits: int = INDEX_DIGITS
    segments: tuple[Segment, ...] = field(init=False)

    def __post_init__(self):
        lh, lw = lowres_shape(self.height, self.width)
        cells = self.width * self.height
        lengths = [
            ("bos", 1),
            ("history", self.capacity * (self.n_digits + lh * lw)),
            ("instruction", self.n_words),
            ("current", cells),
            ("actions", self.chunk_size),
            ("sep", 1),
            ("target", cells),
            ("progress", 1),
        ]
        segs, off = [], 0
        for name, n in lengths:
            segs.append(Segment(name, off, n))
            off += n
        object.__setattr__(self, "segments", tuple(segs))

    @property
    def length(self) -> int:
        last = self.segments[-1]
        return last.offset + last.length

    @property
    def slot_length(self) -> int:
        lh, lw = lowres_shape(self.height, self.width)
        return self.n_digits + lh * lw

    def __getitem__(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def context_end(self) -> int:
        """Index one past SEP: everything before it is context."""
        return self["sep"].offset + 1

    def suffix_positions(self) -> np.ndarray:
        return np.arange(self.context_end, self.length)

    def descriptor(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "capacity": self.capacity,
            "chunk_size": self.chunk_size,
            "n_words": self.n_words,
            "n_digits": self.n_digits,
            "segments": [[s.name, s.offset, s.length] for s in self.segments],
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "SequenceLayout":
        layout = cls(d["width"], d["height"], d["capacity"], d["chunk_size"], d["n_words"], d["n_digits"])
        if [[s.name, s.offset, s.length] for s in layout.segments] != [list(x) for x in d["segments"]]:
            raise ContractError("layout descriptor is inconsistent with its parameters")
        return layout

    def position_tables(self) -> dict[str, np.ndarray]:
        """Per-position segment kind, grid row and grid column ids.

        Current and target cells at the same ``(row, col)`` share row/col ids;
        history cells use the row/col of their block's top-left cell. Non-grid
        positions get the null row ``height`` / null column ``width``.
        """
        L = self.length
        kind = np.zeros(L, dtype=np.int64)
        row = np.full(L, self.height, dtype=np.int64)
        col = np.full(L, self.width, dtype=np.int64)
        k = {name: i for i, name in enumerate(SEGMENT_KINDS)}
        for seg in self.segments:
            if seg.name == "history":
                lh, lw = lowres_shape(self.height, self.width)
                for slot in range(self.capacity):
                    base = seg.offset + slot * self.slot_length
                    kind[base : base + self.n_digits] = k["history_index"]
                    cells = slice(base + self.n_digits, base + self.slot_length)
                    kind[cells] = k["history_frame"]
                    rr, cc = np.divmod(np.arange(lh * lw), lw)
                    row[cells] = 2 * rr
                    col[cells] = 2 * cc
            else:
                kind[seg.slice] = k[seg.name]
                if seg.name in ("current", "target"):
                    rr, cc = np.divmod(np.arange(seg.length), self.width)
                    row[seg.slice] = rr
                    col[seg.slice] = cc
        return {"segment": kind, "row": row, "col": col}


def make_layout(width: int = 12, height: int = 12, capacity: int = 4, chunk_size: int = 4, n_words: int = 4) -> SequenceLayout:
    return SequenceLayout(width, height, capacity, chunk_size, n_words)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class TokenSequence:
    ids: np.ndarray
    layout: SequenceLayout
    mask_flags: np.ndarray

    def check(self, vocab: Vocabulary) -> None:
        if self.ids.shape != (self.layout.length,):
            raise ContractError("sequence length does not match the layout")
        if np.any(self.mask_flags[: self.layout.context_end]):
            raise ContractError("mask flag set inside the context")
        if not np.array_equal(self.mask_flags, self.ids == vocab.mask_id):
            raise ContractError("mask flags disagree with MASK ids")

    def segment(self, name: str) -> np.ndarray:
        return self.ids[self.layout[name].slice]


def build_sequence(
    vocab: Vocabulary,
    layout: SequenceLayout,
    mem: KeyframeMemory,
    instruction: str,
    current_obs: Observation,
    chunk: Sequence[Action],
    target_obs: Observation | None = None,
    progress: float | None = None,
    pad_policy: str = "front",
) -> TokenSequence:
    """Assemble one sequence.

    ``pad_policy`` controls empty history slots: ``"front"`` keeps the newest
    keyframe next to the instruction, ``"back"`` packs keyframes from the
    start, and ``"drop"`` ignores the memory entirely (all PAD).

    Without ``target_obs`` the whole suffix (frame and progress) is MASK. With
    a target but no progress label the progress slot is PAD.
    """
    if len(mem.entries) > layout.capacity:
        raise ContractError("memory larger than layout capacity")
    ids = np.full(layout.length, vocab.pad_id, dtype=np.int64)
    ids[layout["bos"].offset] = vocab.bos_id

    entries = list(mem.entries) if pad_policy != "drop" else []
    if pad_policy not in ("front", "back", "drop"):
        raise ValueError(f"unknown pad policy {pad_policy!r}")
    first_slot = layout.capacity - len(entries) if pad_policy == "front" else 0
    hist = layout["history"].offset
    for j, (index, low) in enumerate(entries):
        base = hist + (first_slot + j) * layout.slot_length
        ids[base : base + layout.n_digits] = [vocab.digit_id(d) for d in index_digits(index, layout.n_digits)]
        ids[base + layout.n_digits : base + layout.slot_length] = low

    words = tokenize_instruction(instruction, vocab)
    if words.size != layout.n_words:
        raise ContractError(f"instruction has {words.size} words, layout expects {layout.n_words}")
    ids[layout["instruction"].slice] = words
    ids[layout["current"].slice] = tokenize_observation(current_obs, "full")
    ids[layout["actions"].slice] = tokenize_chunk(chunk, vocab, layout.chunk_size)
    ids[layout["sep"].offset] = vocab.sep_id

    if target_obs is None:
        ids[layout.context_end :] = vocab.mask_id
    else:
        ids[layout["target"].slice] = tokenize_observation(target_obs, "full")
        if progress is not None:
            ids[layout["progress"].offset] = vocab.progress_id(progress)
    return TokenSequence(ids, layout, ids == vocab.mask_id)


def decode_index(digit_ids: Sequence[int], vocab: Vocabulary) -> int:
    digits = [int(t) - vocab.digit_offset for t in digit_ids]
    if any(not 0 <= d < 10 for d in digits):
        raise DecodeError("non-digit id in frame index")
    return int("".join(map(str, digits)))


def history_indices(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    """Frame indices of the occupied history slots, in sequence order."""
    layout = seq.layout
    out = []
    hist = layout["history"].offset
    for slot in range(layout.capacity):
        base = hist + slot * layout.slot_length
        digits = seq.ids[base : base + layout.n_digits]
        if np.all(digits == vocab.pad_id):
            continue
        out.append(decode_index(digits, vocab))
    return out
