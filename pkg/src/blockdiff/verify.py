"""Greedy-equivalence harness for the speculative decoders.

Each trial draws a model (a small random transformer or a scripted model),
a prompt and a block size, decodes with AR greedy and with every
speculative mode, and records any token disagreement.  A mismatch is
shrunk to the shortest prompt prefix and generation length that still
reproduce it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .decode import DecodeConfig, ar_greedy, decode
from .model import ModelConfig, init_params
from .numerics import Rng
from .scripted import ScriptedModel

SPEC_MODES = ("spec_linear", "spec_quadratic")
DEFAULT_BLOCKS = (1, 2, 4, 8, 16)


@dataclass
class Instance:
    seed: int
    block: int
    kind: str
    prompt: list
    max_new: int
    model: object = field(repr=False)

    def describe(self) -> dict:
        return {"seed": self.seed, "block": self.block, "kind": self.kind,
                "prompt_len": len(self.prompt), "max_new": self.max_new}


@dataclass
class Mismatch:
    seed: int
    block: int
    mode: str
    kind: str
    index: int
    expected: int | None
    got: int | None
    step: int
    prompt_len: int
    max_new: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VerifyReport:
    trials: int
    instances: int
    mismatches: list[Mismatch]

    @property
    def passed(self) -> bool:
        return not self.mismatches

    @property
    def status(self) -> str:
        if self.trials == 0:
            return "no trials"
        return "pass" if self.passed else "fail"


def make_instance(seed: int, block: int) -> Instance:
    rng = Rng(seed)
    pick = rng.integer(4)
    if pick < 2:
        heads = (1, 2, 4)[rng.integer(3)]
        dim = heads * (4, 8)[rng.integer(2)]
        cfg = ModelConfig(vocab_size=rng.integer_in(8, 40), model_dim=dim, num_heads=heads,
                          num_layers=rng.integer_in(1, 2), max_position=512, ffn_dim=2 * dim)
        model = init_params(cfg, seed)
        # sharper heads make greedy runs less repetitive
        model.tensors["lm_head"] *= np.float32(rng.integer_in(1, 8))
        kind = "transformer"
    else:
        model = ScriptedModel(vocab_size=rng.integer_in(8, 40), kind=("markov", "prefix")[pick - 2],
                              draft_error=(0.0, 0.2, 0.5, 1.0)[rng.integer(4)],
                              eos_rate=(0.0, 0.05)[rng.integer(2)], seed=seed)
        kind = f"scripted-{model.kind}"
    n_text = model.cfg.vocab_size - 2
    prompt: list = [rng.integer(n_text) for _ in range(rng.integer_in(1, 12))]
    if kind == "transformer" and rng.random() < 0.3:
        # splice a vision payload into the prompt
        vec = rng.uniform(model.cfg.model_dim, -1.0, 1.0).astype(np.float32)
        prompt.insert(rng.integer(len(prompt) + 1), vec)
    return Instance(seed, block, kind, prompt, rng.integer_in(4, 40), model)


def _first_diff(a: Sequence[int], b: Sequence[int]) -> int | None:
    for i in range(max(len(a), len(b))):
        if i >= len(a) or i >= len(b) or a[i] != b[i]:
            return i
    return None


def _step_of(trace, index: int) -> int:
    """Index of the decode step that committed output token ``index``."""
    seen = 0
    for k, s in enumerate(trace.steps):
        seen += len(s.committed)
        if seen > index:
            return k
    return len(trace.steps)


def _compare(model, prompt, block, max_new, mode):
    ref, _ = ar_greedy(model, prompt, max_new)
    out, trace = decode(model, prompt, DecodeConfig(block=block, max_new=max_new, mode=mode))
    idx = _first_diff(ref, out)
    return idx, ref, out, trace


def _minimize(inst: Instance, mode: str, index: int) -> tuple[list, int]:
    """Shortest prompt prefix and generation length that still fail."""
    prompt, max_new = inst.prompt, index + 1
    for n in range(1, len(inst.prompt) + 1):
        idx, *_ = _compare(inst.model, inst.prompt[:n], inst.block, max_new, mode)
        if idx is not None:
            prompt = inst.prompt[:n]
            break
    idx, *_ = _compare(inst.model, prompt, inst.block, max_new, mode)
    if idx is None:
        return inst.prompt, inst.max_new
    return prompt, idx + 1


def check_instance(inst: Instance, modes: Sequence[str] = SPEC_MODES,
                   minimize: bool = True) -> list[Mismatch]:
    found = []
    for mode in modes:
        idx, ref, out, trace = _compare(inst.model, inst.prompt, inst.block, inst.max_new, mode)
        if idx is None:
            continue
        prompt, max_new = _minimize(inst, mode, idx) if minimize else (inst.prompt, inst.max_new)
        idx2, ref2, out2, trace2 = _compare(inst.model, prompt, inst.block, max_new, mode)
        if idx2 is None:
            idx2, ref2, out2, trace2, prompt, max_new = idx, ref, out, trace, inst.prompt, inst.max_new
        found.append(Mismatch(
            inst.seed, inst.block, mode, inst.kind, idx2,
            ref2[idx2] if idx2 < len(ref2) else None, out2[idx2] if idx2 < len(out2) else None,
            _step_of(trace2, idx2), len(prompt), max_new))
    return found


def run_suite(trials: int = 200, seed: int = 0, blocks: Sequence[int] = DEFAULT_BLOCKS,
              modes: Sequence[str] = SPEC_MODES, on_trial=None) -> VerifyReport:
    """Trial ``i`` uses instance seed ``seed * 1_000_003 + i`` and block ``blocks[i % len]``."""
    if trials < 0:
        raise ValueError("trials must be >= 0")
    if not blocks or min(blocks) < 1:
        raise ValueError("blocks must be a non-empty list of positive sizes")
    mismatches = []
    for i in range(trials):
        inst = make_instance(seed * 1_000_003 + i, blocks[i % len(blocks)])
        found = check_instance(inst, modes)
        mismatches += found
        if on_trial is not None:
            on_trial(inst, found)
    return VerifyReport(trials, trials * len(modes), mismatches)
