"""Dual-stream training: corruption, block-size annealing, batch assembly,
the combined diffusion + causal loss, Adam/SGD and finite-difference checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .masks import DualStreamLayout, MaskMatrix, build_dual_stream, training_mask
from .model import ModelConfig, ModelParams, backward, forward, init_params
from .sequence import (BlockPartition, CorpusConfig, Role, SequenceLayout, generate_corpus,
                       partition_blocks)

IGNORE = -100


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# --- block-size curriculum -------------------------------------------------


@dataclass(frozen=True)
class AnnealSchedule:
    target: int

    def __post_init__(self):
        if self.target < 2 or self.target & (self.target - 1):
            raise ValueError("target block size must be a power of two >= 2")

    @property
    def sizes(self) -> list[int]:
        return [2**i for i in range(1, self.target.bit_length())]


def anneal_block_size(sched: AnnealSchedule, u) -> int:
    """Active block size at training progress ``u``.

    ``u`` may be a float or a ``Fraction``; the floor is taken on the exact
    rational value so step/total progress never suffers rounding.
    """
    u = Fraction(u)
    if not 0 <= u <= 1:
        raise ValueError(f"progress u={float(u)} outside [0, 1]")
    sizes = sched.sizes
    return sizes[min(math.floor(u * len(sizes)), len(sizes) - 1)]


# --- corruption --------------------------------------------------------------


@dataclass(frozen=True)
class NoisyStream:
    """Corrupted copy of the text positions of a layout."""

    positions: tuple[int, ...]
    tokens: tuple[int, ...]
    masked: frozenset[int]


def corrupt(layout: SequenceLayout, partition: BlockPartition, t: float, rng: nx.Rng,
            mask_id: int, complementary: bool = False) -> list[NoisyStream]:
    """Mask each response token independently with probability ``t``.

    With ``complementary`` a second stream masks exactly the response
    positions the first one kept.
    """
    if not 0 < t < 1:
        raise ValueError("masking probability must lie in (0, 1)")
    text = tuple(i for i, r in enumerate(layout.roles) if r != Role.VISION)
    response = [p for s, e in partition.blocks for p in range(s, e)]
    masked = frozenset(p for p in response if rng.random() < t)
    sets = [masked]
    if complementary:
        sets.append(frozenset(response) - masked)
    return [NoisyStream(text, tuple(mask_id if p in m else layout.tokens[p] for p in text), m)
            for m in sets]


# --- batch assembly ------------------------------------------------------------


@dataclass
class TrainingBatch:
    dual: DualStreamLayout
    inputs: list
    position_ids: np.ndarray
    mask: MaskMatrix
    diff_labels: np.ndarray
    causal_labels: np.ndarray

    @property
    def supervised_rows(self) -> np.ndarray:
        return np.flatnonzero((self.diff_labels != IGNORE) | (self.causal_labels != IGNORE))


def assemble_batch(layout: SequenceLayout, partition: BlockPartition, stream: NoisyStream,
                   vision_efficient: bool = True, masked_only: bool = False) -> TrainingBatch:
    """Lay out ``[noisy ; clean]`` with shift-by-one labels.

    A noisy row at position p is supervised with the clean token at p + 1
    when both sit in the same block (optionally only when p + 1 is masked).
    A clean row q is supervised with token q + 1 when that is a response
    token.
    """
    ds = build_dual_stream(layout, partition, vision_efficient)
    by_pos = dict(zip(stream.positions, stream.tokens))
    noisy_tokens = [by_pos.get(p, layout.tokens[p]) for p in ds.noisy_positions]
    inputs = ds.combined_inputs(noisy_tokens)
    owner = partition.block_of()
    n_noisy, n_clean = ds.noisy_len, ds.clean_len

    diff = np.full(n_noisy + n_clean, IGNORE, dtype=np.int64)
    for row, p in enumerate(ds.noisy_positions):
        b = owner.get(p)
        if b is not None and owner.get(p + 1) == b and (not masked_only or p + 1 in stream.masked):
            diff[row] = layout.tokens[p + 1]
    causal = np.full(n_noisy + n_clean, IGNORE, dtype=np.int64)
    for q in range(n_clean - 1):
        if layout.roles[q + 1] == Role.RESPONSE:
            causal[n_noisy + q] = layout.tokens[q + 1]
    return TrainingBatch(ds, inputs, ds.position_ids, training_mask(ds), diff, causal)


# --- loss -------------------------------------------------------------------


class LossOutput(NamedTuple):
    total: float
    diff: float
    causal: float
    grads: dict | None


def batch_logits(params: ModelParams, batch: TrainingBatch, keep_activations=False):
    return forward(params, batch.inputs, batch.position_ids, batch.mask,
                   keep_activations=keep_activations)


def loss_and_grads(params: ModelParams, batch: TrainingBatch, alpha: float = 0.5,
                   beta: float = 0.5, need_grads: bool = True) -> LossOutput:
    fo = batch_logits(params, batch, keep_activations=need_grads)
    logits = fo.logits.astype(np.float64) if params.dtype != np.float64 else fo.logits
    diff, _ = nx.cross_entropy(logits, batch.diff_labels, IGNORE)
    causal, _ = nx.cross_entropy(logits, batch.causal_labels, IGNORE)
    total = alpha * diff + beta * causal
    if not math.isfinite(total):
        raise FloatingPointError("non-finite loss")
    grads = None
    if need_grads:
        dlogits = (alpha * nx.cross_entropy_grad(logits, batch.diff_labels, IGNORE)
                   + beta * nx.cross_entropy_grad(logits, batch.causal_labels, IGNORE))
        grads = backward(params, fo.acts, dlogits.astype(params.dtype))
    return LossOutput(total, diff, causal, grads)


# --- optimizers ---------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict) -> None:
        if self.lr == 0:
            return
        for name, g in grads.items():
            params.tensors[name] -= (self.lr * g).astype(params.dtype)


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0:
                continue
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params.tensors[name] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)


# --- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    lr: float = 3e-3
    steps: int = 2000
    batch_size: int = 8
    block_target: int = 8
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    grad_clip: float | None = 1.0
    complementary: bool = False
    masked_only: bool = False
    vision_efficient: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("need steps >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        AnnealSchedule(self.block_target)


@dataclass
class HistoryRecord:
    step: int
    block_size: int
    total: float
    diff: float
    causal: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "block_size": self.block_size, "total": self.total,
                           "diff": self.diff, "causal": self.causal})


def _sample_loss(params, layout, block, t, rng, cfg: TrainConfig):
    partition = partition_blocks(layout, block)
    streams = corrupt(layout, partition, t, rng, params.cfg.mask_id, cfg.complementary)
    outs = [loss_and_grads(params, assemble_batch(layout, partition, s, cfg.vision_efficient,
                                                  cfg.masked_only), cfg.alpha, cfg.beta)
            for s in streams]
    if len(outs) == 1:
        return outs[0]
    k = len(outs)
    grads = {name: sum(o.grads[name] for o in outs) / k for name in outs[0].grads}
    return LossOutput(sum(o.total for o in outs) / k, sum(o.diff for o in outs) / k,
                      sum(o.causal for o in outs) / k, grads)


def train_loop(params: ModelParams, corpus: list[SequenceLayout], cfg: TrainConfig,
               on_step=None) -> tuple[ModelParams, list[HistoryRecord]]:
    """Train a copy of ``params``; progress ``u = step / steps`` drives the block size."""
    if not corpus:
        raise ValueError("empty corpus")
    params = params.copy()
    sched = AnnealSchedule(cfg.block_target)
    opt = (Adam(cfg.lr, *cfg.adam_betas, cfg.adam_eps) if cfg.optimizer == "adam"
           else SGD(cfg.lr))
    rng = nx.Rng(cfg.seed)
    history = []
    for step in range(cfg.steps):
        block = anneal_block_size(sched, Fraction(step, cfg.steps))
        acc = {name: np.zeros_like(v) for name, v in params.tensors.items()}
        total = diff = causal = 0.0
        for _ in range(cfg.batch_size):
            layout = corpus[rng.integer(len(corpus))]
            t = rng.random()
            while t == 0.0:
                t = rng.random()
            try:
                out = _sample_loss(params, layout, block, t, rng, cfg)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            for name, g in out.grads.items():
                acc[name] += g
            total += out.total
            diff += out.diff
            causal += out.causal
        n = cfg.batch_size
        grads = {name: g / n for name, g in acc.items()}
        if not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(step, "non-finite gradient")
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {name: g * (cfg.grad_clip / norm) for name, g in grads.items()}
        lr = cfg.lr
        if cfg.lr_schedule == "cosine":
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        if isinstance(opt, Adam):
            opt.step(params, grads, lr)
        else:
            opt.lr = lr
            opt.step(params, grads)
        rec = HistoryRecord(step, block, total / n, diff / n, causal / n)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return params, history


# --- gradient check ------------------------------------------------------------


@dataclass
class GradCheckReport:
    h: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def grad_check_batch(cfg: ModelConfig, seed: int, corpus_task: str = "copy",
                     vision: bool = True) -> tuple[ModelParams, TrainingBatch]:
    """Double-precision params and a two-turn batch exercising every mask region."""
    params = init_params(cfg, seed, dtype=nx.DOUBLE)
    ccfg = CorpusConfig(vocab_size=cfg.vocab_size, num_samples=1, num_turns=(2, 2),
                        prompt_len=(2, 4), response_len=(2, 3),
                        vision_slots=(1, 2) if vision else (0, 0),
                        vision_dim=cfg.model_dim, task=corpus_task, seed=seed)
    layout = generate_corpus(ccfg)[0]
    partition = partition_blocks(layout, 2)
    rng = nx.Rng(seed + 1)
    stream = corrupt(layout, partition, 0.5, rng, cfg.mask_id)[0]
    return params, assemble_batch(layout, partition, stream)


def grad_check(params: ModelParams, batch: TrainingBatch, alpha=0.5, beta=0.5, h=1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Central differences against :func:`loss_and_grads` for every tensor.

    ``max_entries`` samples that many entries per tensor instead of all.
    """
    if params.dtype != np.float64:
        raise ValueError("gradient checks need double-precision params")
    analytic = loss_and_grads(params, batch, alpha, beta).grads
    rng = nx.Rng(seed)
    report = GradCheckReport(h)
    probe = params.copy()
    for name, tensor in probe.tensors.items():
        flat = tensor.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.array(sorted({rng.integer(flat.size) for _ in range(max_entries)}))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_and_grads(probe, batch, alpha, beta, need_grads=False).total
            flat[i] = orig - h
            down = loss_and_grads(probe, batch, alpha, beta, need_grads=False).total
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        report.per_tensor[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return report
