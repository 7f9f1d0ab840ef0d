"""Turn-structured token sequences, response spans, block partitions and
the synthetic corpus used for training and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Rng

VISION_SLOT = -1


class Role(IntEnum):
    PROMPT = 0
    VISION = 1
    RESPONSE = 2

    @property
    def code(self) -> str:
        return "PVR"[self]

    @classmethod
    def from_code(cls, c: str) -> "Role":
        return cls("PVR".index(c))


@dataclass
class SequenceLayout:
    """Tokens annotated with role and turn.

    Vision positions hold ``VISION_SLOT`` in ``tokens`` and one payload row
    each in ``vision`` (in position order).
    """

    tokens: list[int]
    roles: list[Role]
    turns: list[int]
    vision: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.roles = [Role(r) for r in self.roles]
        n = len(self.tokens)
        if len(self.roles) != n or len(self.turns) != n:
            raise ValueError("tokens, roles and turns must have equal length")
        self.vision = np.asarray(self.vision, dtype=np.float64)
        if self.vision.ndim != 2:
            raise ValueError("vision payloads must be a 2-D array")
        n_vis = sum(r == Role.VISION for r in self.roles)
        if self.vision.shape[0] != n_vis:
            raise ValueError(f"{n_vis} vision positions but {self.vision.shape[0]} payloads")
        for i, (tok, role) in enumerate(zip(self.tokens, self.roles)):
            if (role == Role.VISION) != (tok == VISION_SLOT):
                raise ValueError(f"position {i}: vision slots and Vision role must coincide")
        if any(b < a for a, b in zip(self.turns, self.turns[1:])):
            raise ValueError("turn indices must be non-decreasing")
        for i in range(1, n):
            same_turn = self.turns[i] == self.turns[i - 1]
            if same_turn and self.roles[i - 1] == Role.RESPONSE and self.roles[i] != Role.RESPONSE:
                raise ValueError(f"position {i}: prompt/vision token after a response in turn {self.turns[i]}")

    def __len__(self):
        return len(self.tokens)

    @property
    def vision_dim(self) -> int:
        return self.vision.shape[1]

    def vision_index(self) -> dict[int, int]:
        """Map from Vision position to its payload row."""
        pos = [i for i, r in enumerate(self.roles) if r == Role.VISION]
        return {p: k for k, p in enumerate(pos)}

    def inputs(self, positions: Iterable[int] | None = None) -> list:
        """Model inputs: token ids, or payload vectors at vision positions."""
        vidx = self.vision_index()
        positions = range(len(self)) if positions is None else positions
        return [self.vision[vidx[p]] if self.roles[p] == Role.VISION else self.tokens[p]
                for p in positions]

    def prefix(self, n: int) -> "SequenceLayout":
        n_vis = sum(r == Role.VISION for r in self.roles[:n])
        return SequenceLayout(self.tokens[:n], self.roles[:n], self.turns[:n],
                              self.vision[:n_vis] if n_vis else self.vision[:0])

    def split_last_response(self) -> tuple["SequenceLayout", list[int]]:
        """Prompt (everything before the final response span) and that response."""
        spans = derive_response_spans(self)
        if not spans:
            raise ValueError("layout has no response")
        _, start, end = spans[-1]
        return self.prefix(start), self.tokens[start:end]

    def to_record(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "roles": "".join(r.code for r in self.roles),
            "turns": list(self.turns),
            "vision_payload_base": self.vision.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SequenceLayout":
        roles = [Role.from_code(c) for c in rec["roles"]]
        vision = np.asarray(rec["vision_payload_base"], dtype=np.float64)
        if vision.size == 0:
            vision = np.zeros((0, 0))
        return cls(list(rec["tokens"]), roles, list(rec["turns"]), vision)


@dataclass(frozen=True)
class BlockPartition:
    blocks: tuple[tuple[int, int], ...]
    block_size: int

    def lengths(self) -> list[int]:
        return [e - s for s, e in self.blocks]

    def block_of(self) -> dict[int, int]:
        """Position -> block id for every partitioned position."""
        return {p: b for b, (s, e) in enumerate(self.blocks) for p in range(s, e)}


def derive_response_spans(layout: SequenceLayout) -> list[tuple[int, int, int]]:
    """One ``(turn, start, end)`` half-open span per turn with a response."""
    spans = []
    i, n = 0, len(layout)
    seen_turns = set()
    while i < n:
        if layout.roles[i] != Role.RESPONSE:
            i += 1
            continue
        turn = layout.turns[i]
        j = i
        while j < n and layout.roles[j] == Role.RESPONSE and layout.turns[j] == turn:
            j += 1
        if turn in seen_turns:
            raise ValueError(f"non-contiguous response run in turn {turn}")
        seen_turns.add(turn)
        spans.append((turn, i, j))
        i = j
    return spans


def partition_blocks(layout: SequenceLayout, block_size: int) -> BlockPartition:
    """Split each response span into blocks, truncating the last one at the span end."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    blocks = []
    for _, start, end in derive_response_spans(layout):
        for s in range(start, end, block_size):
            blocks.append((s, min(s + block_size, end)))
    return BlockPartition(tuple(blocks), block_size)


# --- synthetic corpus ------------------------------------------------------

TASKS = ("copy", "reverse", "kv-retrieval")


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 64
    num_samples: int = 256
    num_turns: tuple[int, int] = (1, 1)
    prompt_len: tuple[int, int] = (4, 8)
    response_len: tuple[int, int] = (2, 4)
    vision_slots: tuple[int, int] = (0, 0)
    vision_dim: int = 64
    task: str = "copy"
    seed: int = 0

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def num_text_tokens(self) -> int:
        # ids below EOS; EOS and MASK are reserved
        return self.vocab_size - 2

    def validate(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")
        for name in ("num_turns", "prompt_len", "response_len", "vision_slots"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"infeasible range {name}={lo, hi}")
        if self.num_turns[0] < 1:
            raise ValueError("num_turns must be >= 1")
        if self.task == "kv-retrieval":
            if self.vision_slots[0] < 1:
                raise ValueError("kv-retrieval needs at least one vision slot")
            if self.prompt_len[0] < 1 or self.response_len[0] < 1:
                raise ValueError("kv-retrieval needs prompt_len >= 1 and response_len >= 1")
            if self.vision_slots[1] > self.num_text_tokens:
                raise ValueError("more table entries than distinct keys")
            if self.vision_dim < kv_field_width(self):
                raise ValueError(f"vision_dim must be >= {kv_field_width(self)} for kv-retrieval")
        elif self.prompt_len[0] < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.vision_slots[1] > 0 and self.vision_dim < 1:
            raise ValueError("vision_dim must be >= 1")


def kv_field_width(cfg: CorpusConfig) -> int:
    """Scalar fields per table entry: the key plus each value slot."""
    return 1 + cfg.response_len[1]


def kv_projection(cfg: CorpusConfig) -> np.ndarray:
    """Fixed random orthogonal map from entry coordinates to payload vectors."""
    rng = Rng(cfg.seed ^ 0x5EED0F7AB1E)
    q, _ = np.linalg.qr(rng.uniform((cfg.vision_dim, cfg.vision_dim), -1.0, 1.0))
    return q[: kv_field_width(cfg)]


def encode_kv_entry(cfg: CorpusConfig, key: int, value: list[int], proj: np.ndarray) -> np.ndarray:
    coords = np.zeros(proj.shape[0])
    for f, tok in enumerate([key] + list(value)):
        coords[f] = (tok + 1) / cfg.vocab_size
    return coords @ proj


def decode_vision_table(cfg: CorpusConfig, payloads: np.ndarray, value_len: int) -> dict[int, list[int]]:
    """Recover the key->value table from vision payloads (generator-side lookup oracle)."""
    proj = kv_projection(cfg)
    coords = np.asarray(payloads) @ proj.T
    ids = np.rint(coords * cfg.vocab_size).astype(int) - 1
    return {int(row[0]): [int(t) for t in row[1: 1 + value_len]] for row in ids}


def _text_tokens(rng: Rng, cfg: CorpusConfig, n: int) -> list[int]:
    return [rng.integer(cfg.num_text_tokens) for _ in range(n)]


def _make_turn(rng: Rng, cfg: CorpusConfig, proj):
    """Returns (prompt tokens, vision payload rows, response tokens incl. EOS)."""
    n_vis = rng.integer_in(*cfg.vision_slots)
    if cfg.task == "kv-retrieval":
        value_len = rng.integer_in(*cfg.response_len)
        keys = []
        while len(keys) < n_vis:
            k = rng.integer(cfg.num_text_tokens)
            if k not in keys:
                keys.append(k)
        table = {k: _text_tokens(rng, cfg, value_len) for k in keys}
        query = keys[rng.integer(n_vis)]
        payloads = [encode_kv_entry(cfg, k, table[k], proj) for k in keys]
        # prompt: filler tokens ending in the queried key
        prompt = _text_tokens(rng, cfg, rng.integer_in(*cfg.prompt_len) - 1) + [query]
        response = table[query]
    else:
        prompt = _text_tokens(rng, cfg, rng.integer_in(*cfg.prompt_len))
        payloads = [rng.uniform(cfg.vision_dim, -1.0, 1.0) for _ in range(n_vis)]
        response = list(prompt) if cfg.task == "copy" else list(reversed(prompt))
    return prompt, payloads, response + [cfg.eos_id]


def generate_corpus(cfg: CorpusConfig) -> list[SequenceLayout]:
    cfg.validate()
    rng = Rng(cfg.seed)
    proj = kv_projection(cfg) if cfg.task == "kv-retrieval" else None
    corpus = []
    for _ in range(cfg.num_samples):
        tokens, roles, turns, vision = [], [], [], []
        for t in range(rng.integer_in(*cfg.num_turns)):
            prompt, payloads, response = _make_turn(rng, cfg, proj)
            tokens += prompt + [VISION_SLOT] * len(payloads) + response
            roles += ([Role.PROMPT] * len(prompt) + [Role.VISION] * len(payloads)
                      + [Role.RESPONSE] * len(response))
            turns += [t] * (len(prompt) + len(payloads) + len(response))
            vision += payloads
        vis = np.array(vision) if vision else np.zeros((0, cfg.vision_dim))
        corpus.append(SequenceLayout(tokens, roles, turns, vis))
    return corpus


def save_corpus(corpus: list[SequenceLayout], path: str | Path) -> None:
    with open(path, "w") as fh:
        for layout in corpus:
            fh.write(json.dumps(layout.to_record()) + "\n")


def load_corpus(path: str | Path) -> list[SequenceLayout]:
    with open(path) as fh:
        return [SequenceLayout.from_record(json.loads(line)) for line in fh if line.strip()]
