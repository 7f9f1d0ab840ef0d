"""Pre-allocated per-layer key/value history."""

from __future__ import annotations

import numpy as np


class CacheCapacityError(RuntimeError):
    pass


class KvCache:
    """Fixed-capacity cache shared by every layer of one decode session.

    ``crop`` only moves the length pointer; rows past it are stale and get
    overwritten by the next ``append``.
    """

    def __init__(self, layers: int, dim: int, capacity: int, dtype=np.float32):
        if layers < 1 or capacity < 0:
            raise ValueError("need layers >= 1 and capacity >= 0")
        self.capacity = capacity
        self.keys = [np.zeros((capacity, dim), dtype=dtype) for _ in range(layers)]
        self.values = [np.zeros((capacity, dim), dtype=dtype) for _ in range(layers)]
        self.len = 0

    @property
    def layers(self) -> int:
        return len(self.keys)

    def __len__(self):
        return self.len

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Live (key, value) rows of layer ``i`` as views."""
        return self.keys[i][: self.len], self.values[i][: self.len]

    def append(self, keys: list[np.ndarray], values: list[np.ndarray]) -> "KvCache":
        if len(keys) != self.layers or len(values) != self.layers:
            raise ValueError(f"expected {self.layers} layers of rows")
        counts = {k.shape[0] for k in keys} | {v.shape[0] for v in values}
        if len(counts) != 1:
            raise ValueError(f"row counts differ across layers: {sorted(counts)}")
        n = counts.pop()
        if self.len + n > self.capacity:
            raise CacheCapacityError(f"cache capacity {self.capacity} exceeded ({self.len} + {n})")
        for layer, (k, v) in enumerate(zip(keys, values)):
            self.keys[layer][self.len: self.len + n] = k
            self.values[layer][self.len: self.len + n] = v
        self.len += n
        return self

    def crop(self, n: int) -> "KvCache":
        if n < 0 or n > self.len:
            raise ValueError(f"cannot crop cache of length {self.len} to {n}")
        self.len = n
        return self

    def keep_stride(self, base: int, group: int, keep_index: int = 0) -> "KvCache":
        """Compact the tail past ``base``: keep row ``keep_index`` of every ``group`` rows."""
        if group < 1 or not 0 <= keep_index < group:
            raise ValueError("need group >= 1 and 0 <= keep_index < group")
        if base < 0 or base > self.len:
            raise ValueError(f"base {base} outside cache of length {self.len}")
        tail = self.len - base
        if tail % group:
            raise ValueError(f"tail length {tail} is not a multiple of {group}")
        src = base + keep_index + group * np.arange(tail // group)
        for layer in range(self.layers):
            self.keys[layer][base: base + src.size] = self.keys[layer][src]
            self.values[layer][base: base + src.size] = self.values[layer][src]
        self.len = base + src.size
        return self

    def snapshot(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(k.copy(), v.copy()) for k, v in (self.layer(i) for i in range(self.layers))]
