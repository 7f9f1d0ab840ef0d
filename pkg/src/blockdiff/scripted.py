"""A rule-based stand-in for the transformer, for decoder tests.

It honours the decoder interface (masks, position ids, cache policies) but
computes its prediction from the visible ``(position, token)`` pairs:

* a row whose visible set holds no MASK behaves like a causal model whose
  next token is a fixed function of the prefix;
* a row that sees a MASK rolls that function forward over the gap and is
  then wrong with probability ``draft_error``.

``draft_error=0`` gives perfect drafts, ``1`` gives drafts that are always
wrong, so acceptance lengths can be pinned exactly.  The cache stores each
row's ``(token, position)``, so stale or misplaced rows change the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvcache import KvCache
from .model import ForwardOutput
from .numerics import Rng

_M64 = (1 << 64) - 1
_VISION = -2


def _mix(*values: int) -> int:
    h = 0x243F6A8885A308D3
    for v in values:
        h = (h ^ (v & _M64)) * 0x100000001B3 & _M64
        h ^= h >> 29
        h = h * 0xBF58476D1CE4E5B9 & _M64
        h ^= h >> 32
    return h


@dataclass(frozen=True)
class ScriptedConfig:
    vocab_size: int
    max_position: int = 1 << 20

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2


class ScriptedModel:
    def __init__(self, vocab_size: int = 32, kind: str = "markov", draft_error: float = 0.3,
                 eos_rate: float = 0.0, seed: int = 0, margin: float = 4.0):
        if kind not in ("markov", "prefix"):
            raise ValueError("kind must be 'markov' or 'prefix'")
        self.cfg = ScriptedConfig(vocab_size)
        self.kind = kind
        self.draft_error = draft_error
        self.eos_rate = eos_rate
        self.seed = seed
        self.margin = margin
        rng = Rng(seed)
        n_text = vocab_size - 2
        self.table = [self.cfg.eos_id if rng.random() < eos_rate else rng.integer(n_text)
                      for _ in range(vocab_size)]

    def new_cache(self, capacity: int) -> KvCache:
        return KvCache(1, 2, capacity, np.float64)

    def next_token(self, prefix: list[tuple[int, int]]) -> int:
        """The causal model: next token after the (position, token) prefix."""
        if self.kind == "markov":
            return self.table[prefix[-1][1] if prefix[-1][1] >= 0 else 0]
        h = _mix(self.seed, *[v for pt in prefix for v in pt])
        if h % 1000 < self.eos_rate * 1000:
            return self.cfg.eos_id
        return h % (self.cfg.vocab_size - 2)

    def _predict(self, visible: list[tuple[int, int]], pos: int) -> int:
        sees_mask = any(tok == self.cfg.mask_id for _, tok in visible)
        known = sorted((p, t) for p, t in visible if t != self.cfg.mask_id and p <= pos)
        if not known:
            return 0
        prefix = list(known)
        while prefix[-1][0] < pos:
            prefix.append((prefix[-1][0] + 1, self.next_token(prefix)))
        pred = self.next_token(prefix)
        if sees_mask and _mix(self.seed, 7, pos, pred, len(known)) % 10_000 < self.draft_error * 10_000:
            pred = (pred + 1) % (self.cfg.vocab_size - 2)
        return pred

    def forward(self, inputs, position_ids, mask, cache=None, cache_policy="none"):
        n = len(inputs)
        position_ids = np.asarray(position_ids, dtype=np.int64)
        use_cache = cache is not None and cache_policy != "none"
        past = cache.len if use_cache else 0
        if mask.q_len != n or mask.k_len != past + n:
            raise ValueError("mask shape does not fit inputs and cache")
        toks = [int(t) if isinstance(t, (int, np.integer)) else _VISION for t in inputs]
        rows = np.array([[t, p] for t, p in zip(toks, position_ids)], dtype=np.float64).reshape(n, 2)
        keys = np.concatenate([cache.layer(0)[0], rows]) if use_cache else rows
        key_pairs = [(int(p), int(t)) for t, p in keys]
        logits = np.zeros((n, self.cfg.vocab_size))
        for i in range(n):
            visible = [key_pairs[j] for j in np.flatnonzero(mask.allow[i])]
            logits[i, self._predict(visible, int(position_ids[i]))] = self.margin
        if use_cache and cache_policy == "read_write":
            cache.append([rows], [np.zeros_like(rows)])
        return ForwardOutput(logits, logits, cache if use_cache else None)
