"""Greedy AR decoding, confidence-thresholded block denoising, and the two
self-speculative decoders (two passes per block, or one fused pass over
``B * (B + 1)`` tokens).

All modes share one accounting rule: the prompt pass is the prefill and
is reported separately, together with any token it already determines.
``tokens_per_nfe`` divides the tokens committed after the prefill by the
forward passes spent after it.

``params`` can be anything exposing ``cfg`` (with ``mask_id``, ``eos_id``),
``new_cache(capacity)`` and ``forward(inputs, position_ids, mask, cache,
cache_policy)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .masks import (causal_mask, draft_mask, prompt_draft_mask, quadratic_mask,
                    quadratic_positions, verify_mask)
from .numerics import softmax_rows
from .sequence import SequenceLayout

MODES = ("ar", "mdm", "spec_linear", "spec_quadratic")


@dataclass(frozen=True)
class DecodeConfig:
    block: int = 8
    tau: float = 0.9
    max_new: int = 64
    mode: str = "ar"

    def __post_init__(self):
        if self.block < 1 or self.max_new < 1:
            raise ValueError("need block >= 1 and max_new >= 1")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


@dataclass
class DecodeStep:
    phase: str
    nfe_delta: int
    committed: list[int]
    block_index: int
    cache_len: int
    accepted_len: int | None = None
    revealed: int | None = None


@dataclass
class DecodeTrace:
    mode: str
    block: int
    prompt_len: int
    steps: list[DecodeStep] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return [t for s in self.steps for t in s.committed]

    @property
    def prefill_nfe(self) -> int:
        return sum(s.nfe_delta for s in self.steps if s.phase == "prefill")

    @property
    def nfe(self) -> int:
        """Forward passes after the prefill."""
        return sum(s.nfe_delta for s in self.steps if s.phase != "prefill")

    @property
    def decode_tokens(self) -> int:
        return sum(len(s.committed) for s in self.steps if s.phase != "prefill")

    @property
    def tokens_per_nfe(self) -> float | None:
        return self.decode_tokens / self.nfe if self.nfe else None

    def denoise_reveals(self) -> list[int]:
        return [s.revealed for s in self.steps if s.phase == "denoise"]

    def to_records(self) -> list[dict]:
        recs = [{"mode": self.mode, "block": s.block_index, "phase": s.phase,
                 "nfe_delta": s.nfe_delta, "accepted_len": s.accepted_len,
                 "revealed": s.revealed, "cache_len": s.cache_len, "committed": s.committed}
                for s in self.steps]
        recs.append({"mode": self.mode, "tokens": len(self.tokens), "prefill_nfe": self.prefill_nfe,
                     "nfe": self.nfe, "tokens_per_nfe": self.tokens_per_nfe})
        return recs

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())


def greedy(logits: np.ndarray, mask_id: int) -> np.ndarray:
    """Row-wise argmax that never emits MASK; ties go to the lowest id."""
    logits = np.array(logits, dtype=np.float64, ndmin=2)
    logits[:, mask_id] = -np.inf
    return np.argmax(logits, axis=1)


class _Session:
    """One decode: cache, output and trace, with the EOS / length stop rule."""

    def __init__(self, params, prompt, cfg: DecodeConfig, scratch: int):
        self.params = params
        self.cfg = cfg
        self.mask_id = params.cfg.mask_id
        self.eos_id = params.cfg.eos_id
        self.prompt = prompt.inputs() if isinstance(prompt, SequenceLayout) else list(prompt)
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        self.L = len(self.prompt)
        self.cache = params.new_cache(self.L + cfg.max_new + scratch)
        self.out: list[int] = []
        self.trace = DecodeTrace(cfg.mode, cfg.block, self.L)
        self.done = False

    def run(self, inputs, positions, mask, policy) -> np.ndarray:
        before = self.cache.len
        fo = self.params.forward(inputs, np.asarray(positions), mask, self.cache, policy)
        if policy == "read_only" and self.cache.len != before:
            raise RuntimeError("read-only forward changed the cache length")
        return fo.logits

    def argmax(self, logits):
        return [int(t) for t in greedy(logits, self.mask_id)]

    def commit(self, tokens: Sequence[int]) -> list[int]:
        """Append tokens, stopping after EOS or at ``max_new``."""
        taken = []
        for tok in tokens:
            if self.done:
                break
            taken.append(int(tok))
            self.out.append(int(tok))
            if tok == self.eos_id or len(self.out) >= self.cfg.max_new:
                self.done = True
        return taken

    def record(self, phase, nfe, committed, block_index, **kw):
        self.trace.steps.append(DecodeStep(phase, nfe, committed, block_index, self.cache.len, **kw))

    def prefill(self) -> np.ndarray:
        return self.run(self.prompt, np.arange(self.L), causal_mask(self.L), "read_write")


def ar_greedy(params, prompt, max_new: int) -> tuple[list[int], DecodeTrace]:
    """Reference decoder: one token per forward pass."""
    s = _Session(params, prompt, DecodeConfig(block=1, max_new=max_new, mode="ar"), scratch=1)
    logits = s.prefill()
    s.record("prefill", 1, s.commit(s.argmax(logits[-1])), 0)
    while not s.done:
        pos = s.cache.len
        logits = s.run([s.out[-1]], [pos], causal_mask(1, pos), "read_write")
        s.record("decode", 1, s.commit(s.argmax(logits[-1])), len(s.out))
    return s.out, s.trace


def mdm_decode(params, prompt, cfg: DecodeConfig) -> tuple[list[int], DecodeTrace]:
    """Block denoising seeded by one AR token per block.

    Each denoise pass reveals every masked position whose confidence (max
    probability of the row predicting it) reaches ``tau``, and always at
    least the most confident one.  ``tau == 1`` therefore reveals exactly
    one token per pass.  A causal pass then writes the finished block to the
    cache and yields the next block's seed.
    """
    B = cfg.block
    s = _Session(params, prompt, cfg, scratch=B)
    logits = s.prefill()
    s.record("prefill", 1, s.commit(s.argmax(logits[-1])), 0)
    block_index = 0
    while not s.done:
        base = s.cache.len
        block = [s.out[-1]] + [s.mask_id] * (B - 1)
        positions = base + np.arange(B)
        masked = set(range(1, B))
        while masked:
            logits = s.run(block, positions, draft_mask(B, base), "read_only")
            probs = softmax_rows(logits)
            cand = s.argmax(logits)
            order = sorted(masked)
            conf = np.array([probs[p - 1, cand[p - 1]] for p in order])
            if cfg.tau < 1.0:
                reveal = {p for p, c in zip(order, conf) if c >= cfg.tau}
            else:
                reveal = set()
            reveal.add(order[int(np.argmax(conf))])
            for p in reveal:
                block[p] = cand[p - 1]
            masked -= reveal
            committed = s.commit(block[1:]) if not masked else []
            s.record("denoise", 1, committed, block_index, revealed=len(reveal))
        if s.done:
            break
        logits = s.run(block, positions, verify_mask(B, base), "read_write")
        block_index += 1
        s.record("commit", 1, s.commit(s.argmax(logits[-1])), block_index)
    return s.out, s.trace


def linear_accept_length(ar_pred: Sequence[int], draft: Sequence[int]) -> int:
    """Tokens accepted from one verify pass.

    ``ar_pred[j]`` is the causal prediction after ``draft[j]``; acceptance
    runs up to and including the first disagreement with ``draft[j + 1]``,
    or the whole block when none exists.
    """
    B = len(draft)
    for j in range(B - 1):
        if ar_pred[j] != draft[j + 1]:
            return j + 1
    return B


def spec_linear(params, prompt, cfg: DecodeConfig) -> tuple[list[int], DecodeTrace]:
    """Draft the block bidirectionally, verify it causally, keep the AR predictions."""
    B = cfg.block
    s = _Session(params, prompt, cfg, scratch=B)
    logits = s.prefill()
    s.record("prefill", 1, s.commit(s.argmax(logits[-1])), 0)
    block_index = 0
    while not s.done:
        base = s.cache.len
        positions = base + np.arange(B)
        draft = [s.out[-1]] + [s.mask_id] * (B - 1)
        logits = s.run(draft, positions, draft_mask(B, base), "read_only")
        draft[1:] = s.argmax(logits[:-1])
        logits = s.run(draft, positions, verify_mask(B, base), "read_write")
        ar_pred = s.argmax(logits)
        k = linear_accept_length(ar_pred, draft)
        committed = s.commit(ar_pred[:k])
        # rows of this block up to the last commit hold committed tokens; that commit stays
        # pending.  EOS or max_new may cut the accepted run short.
        s.cache.crop(base + len(committed))
        block_index += 1
        s.record("decode", 2, committed, block_index, accepted_len=k)
    return s.out, s.trace


def spec_quadratic(params, prompt, cfg: DecodeConfig) -> tuple[list[int], DecodeTrace]:
    """One fused pass per block: group ``i`` verifies ``d[i]`` and proposes the
    block that follows if everything through ``d[i]`` is accepted."""
    B = cfg.block
    s = _Session(params, prompt, cfg, scratch=B * (B + 1))
    L = s.L
    z = s.prompt + [s.mask_id] * B
    logits = s.run(z, np.arange(L + B), prompt_draft_mask(L, B), "read_write")
    s.cache.crop(L)
    draft = s.argmax(logits[L - 1: L - 1 + B])
    s.record("prefill", 1, [], 0)
    block_index = 0
    while not s.done:
        base = s.cache.len
        q = [tok for d in draft for tok in [d] + [s.mask_id] * B]
        logits = s.run(q, quadratic_positions(B, base), quadratic_mask(B, base), "read_write")
        P = np.asarray(s.argmax(logits)).reshape(B, B + 1)
        k = 1
        while k < B and P[k - 1, 0] == draft[k]:
            k += 1
        committed = s.commit(draft[:k])
        draft = [int(t) for t in P[k - 1, :B]]
        s.cache.crop(base + len(committed) * (B + 1))
        s.cache.keep_stride(base, B + 1, 0)
        block_index += 1
        s.record("decode", 1, committed, block_index, accepted_len=k)
    return s.out, s.trace


def decode(params, prompt, cfg: DecodeConfig) -> tuple[list[int], DecodeTrace]:
    if cfg.mode == "ar":
        out, trace = ar_greedy(params, prompt, cfg.max_new)
        trace.block = cfg.block
        return out, trace
    return {"mdm": mdm_decode, "spec_linear": spec_linear,
            "spec_quadratic": spec_quadratic}[cfg.mode](params, prompt, cfg)


@dataclass
class Metrics:
    tokens: int
    nfe: int
    prefill_nfe: int
    tokens_per_nfe: float | None
    samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(traces: DecodeTrace | Sequence[DecodeTrace], min_len_filter: int = 0) -> Metrics:
    """Aggregate Tokens/NFE over traces generating at least ``min_len_filter`` tokens.

    With nothing left after filtering ``tokens_per_nfe`` is ``None``.
    """
    if isinstance(traces, DecodeTrace):
        traces = [traces]
    kept = [t for t in traces if len(t.tokens) >= min_len_filter]
    nfe = sum(t.nfe for t in kept)
    decode_tokens = sum(t.decode_tokens for t in kept)
    return Metrics(
        tokens=sum(len(t.tokens) for t in kept),
        nfe=nfe,
        prefill_nfe=sum(t.prefill_nfe for t in kept),
        tokens_per_nfe=decode_tokens / nfe if kept and nfe else None,
        samples=len(kept),
    )


def mean_reveal_per_denoise(traces: Sequence[DecodeTrace]) -> float | None:
    reveals = [r for t in traces for r in t.denoise_reveals()]
    return sum(reveals) / len(reveals) if reveals else None
