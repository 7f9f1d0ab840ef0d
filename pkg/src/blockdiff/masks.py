"""Attention permission matrices for training and for every decoding pass.

Training runs on the concatenation ``[noisy ; clean]``.  The noisy stream
holds a copy of each text position (vision is kept in the clean stream
only, unless the duplicate-vision baseline is requested).  Three regions
are open:

* clean -> clean: token-level causal;
* noisy -> noisy: bidirectional inside one response block;
* noisy -> clean: strictly earlier than the query's block start.

Blocks come from :func:`blockdiff.sequence.partition_blocks`, which already
cuts the last block of every response at the response end, so no noisy
query can see the next turn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sequence import BlockPartition, Role, SequenceLayout


@dataclass(frozen=True)
class MaskMatrix:
    allow: np.ndarray

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        if allow.ndim != 2:
            raise ValueError("allow must be 2-D")
        empty = ~allow.any(axis=1)
        if empty.any():
            raise ValueError(f"query rows with no allowed key: {np.flatnonzero(empty).tolist()}")
        object.__setattr__(self, "allow", allow)

    @property
    def q_len(self) -> int:
        return self.allow.shape[0]

    @property
    def k_len(self) -> int:
        return self.allow.shape[1]


@dataclass(frozen=True)
class DualStreamLayout:
    layout: SequenceLayout
    partition: BlockPartition
    noisy_positions: tuple[int, ...]
    vision_efficient: bool

    @property
    def clean_len(self) -> int:
        return len(self.layout)

    @property
    def noisy_len(self) -> int:
        return len(self.noisy_positions)

    @property
    def total_len(self) -> int:
        return self.noisy_len + self.clean_len

    @property
    def block_of(self) -> list[int | None]:
        """Block id per noisy row (``None`` outside response blocks)."""
        owner = self.partition.block_of()
        return [owner.get(p) for p in self.noisy_positions]

    @property
    def position_ids(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.noisy_positions, dtype=np.int64),
                               np.arange(self.clean_len, dtype=np.int64)])

    def combined_inputs(self, noisy_tokens: list[int] | None = None) -> list:
        """Model inputs for ``[noisy ; clean]``; ``noisy_tokens`` overrides the noisy copy."""
        noisy = self.layout.inputs(self.noisy_positions)
        if noisy_tokens is not None:
            if len(noisy_tokens) != self.noisy_len:
                raise ValueError("noisy_tokens length mismatch")
            noisy = [n if self.layout.roles[p] == Role.VISION else t
                     for n, t, p in zip(noisy, noisy_tokens, self.noisy_positions)]
        return noisy + self.layout.inputs()

    def headers(self) -> tuple[str, str]:
        roles = self.layout.roles
        stream = "N" * self.noisy_len + "C" * self.clean_len
        role = "".join(roles[p].code for p in self.noisy_positions) + "".join(r.code for r in roles)
        return stream, role


def build_dual_stream(layout: SequenceLayout, partition: BlockPartition,
                      vision_efficient: bool = True) -> DualStreamLayout:
    if vision_efficient:
        noisy = tuple(i for i, r in enumerate(layout.roles) if r != Role.VISION)
    else:
        noisy = tuple(range(len(layout)))
    return DualStreamLayout(layout, partition, noisy, vision_efficient)


def training_mask(ds: DualStreamLayout) -> MaskMatrix:
    n_noisy, n_clean = ds.noisy_len, ds.clean_len
    noisy_pos = np.asarray(ds.noisy_positions, dtype=np.int64)
    clean_pos = np.arange(n_clean)
    block_id = np.array([-1 if b is None else b for b in ds.block_of], dtype=np.int64)
    starts = np.array([s for s, _ in ds.partition.blocks] or [0], dtype=np.int64)
    in_block = block_id >= 0

    allow = np.zeros((n_noisy + n_clean, n_noisy + n_clean), dtype=bool)
    # clean -> clean: causal
    allow[n_noisy:, n_noisy:] = clean_pos[None, :] <= clean_pos[:, None]

    # noisy -> noisy: same response block, or self for unblocked rows
    same_block = (block_id[:, None] == block_id[None, :]) & in_block[:, None]
    allow[:n_noisy, :n_noisy] = same_block | np.eye(n_noisy, dtype=bool) & ~in_block[:, None]

    # noisy -> clean: before own block start, or causal for unblocked rows
    limit = np.where(in_block, starts[np.maximum(block_id, 0)], noisy_pos + 1)
    allow[:n_noisy, n_noisy:] = clean_pos[None, :] < limit[:, None]
    return MaskMatrix(allow)


def causal_mask(n: int, cache_len: int = 0) -> MaskMatrix:
    allow = np.ones((n, cache_len + n), dtype=bool)
    allow[:, cache_len:] = np.tri(n, dtype=bool)
    return MaskMatrix(allow)


def draft_mask(block: int, cache_len: int = 0) -> MaskMatrix:
    if block < 1:
        raise ValueError("block must be >= 1")
    return MaskMatrix(np.ones((block, cache_len + block), dtype=bool))


def verify_mask(block: int, cache_len: int = 0) -> MaskMatrix:
    if block < 1:
        raise ValueError("block must be >= 1")
    return causal_mask(block, cache_len)


def prompt_draft_mask(prompt_len: int, block: int) -> MaskMatrix:
    """First quadratic pass: causal over the prompt, mask rows see everything."""
    n = prompt_len + block
    allow = np.tri(n, dtype=bool)
    allow[prompt_len:, :] = True
    return MaskMatrix(allow)


def quadratic_mask(block: int, cache_len: int = 0) -> MaskMatrix:
    """Fused verify+propose mask over ``block`` groups of ``block + 1`` tokens.

    Every row sees the whole cache.  A group's first token sees the first
    tokens of its own and all earlier groups; its other tokens see their
    own group only.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    g = block + 1
    n = block * g
    idx = np.arange(n)
    group, slot = idx // g, idx % g
    first = slot == 0
    window = np.where(
        first[:, None],
        first[None, :] & (group[None, :] <= group[:, None]),
        group[None, :] == group[:, None],
    )
    allow = np.ones((n, cache_len + n), dtype=bool)
    allow[:, cache_len:] = window
    return MaskMatrix(allow)


def quadratic_positions(block: int, s: int) -> np.ndarray:
    """Group ``i`` covers positions ``s + i ... s + i + block``."""
    g = np.arange(block)[:, None]
    j = np.arange(block + 1)[None, :]
    return (s + g + j).reshape(-1).astype(np.int64)


def dump_mask(mask: MaskMatrix, stream: str | None = None, role: str | None = None) -> str:
    """Text rendering: optional header lines, then one row of 0/1 per query."""
    lines = [f"# q={mask.q_len} k={mask.k_len}"]
    if stream is not None:
        lines.append(f"# stream {stream}")
    if role is not None:
        lines.append(f"# role   {role}")
    lines += ["".join("1" if a else "0" for a in row) for row in mask.allow]
    return "\n".join(lines) + "\n"
