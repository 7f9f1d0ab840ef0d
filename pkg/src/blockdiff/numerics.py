"""Dense numeric kernels and the deterministic PRNG.

Every reduction here accumulates sequentially in index order.  A row's
result therefore depends only on that row's inputs, never on how many
other rows were computed alongside it, which is what lets a cached
one-token forward agree bitwise with a wide verify pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

SINGLE = np.float32
DOUBLE = np.float64

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


@njit(cache=True)
def _matmul_kernel(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]


@njit(cache=True)
def _masked_softmax_kernel(scores, allow, out):
    n, m = scores.shape
    for i in range(n):
        mx = scores[i, 0]
        found = False
        for j in range(m):
            if allow[i, j] and (not found or scores[i, j] > mx):
                mx = scores[i, j]
                found = True
        total = scores[i, 0] * 0
        for j in range(m):
            if allow[i, j]:
                e = math.exp(scores[i, j] - mx)
                out[i, j] = e
                total += e
        for j in range(m):
            if allow[i, j]:
                out[i, j] = out[i, j] / total


@njit(cache=True)
def _rms_norm_kernel(x, gamma, eps, out, inv):
    n, d = x.shape
    for i in range(n):
        acc = x[i, 0] * 0
        for j in range(d):
            acc += x[i, j] * x[i, j]
        r = 1 / math.sqrt(acc / d + eps)
        inv[i] = r
        for j in range(d):
            out[i, j] = gamma[j] * (x[i, j] * r)


@njit(cache=True)
def _gelu_kernel(x, out):
    c = math.sqrt(2.0 / math.pi)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        v = flat_x[i]
        flat_o[i] = 0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v * v * v)))


def _as_matrix(x, name):
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def matmul(a, b):
    """Dense product with sequential accumulation over the inner index."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    if a.shape[1]:
        _matmul_kernel(a, b, out)
    return out


def masked_softmax(scores, allow):
    """Row softmax restricted to allowed keys; disallowed entries are exactly 0.

    Raises ValueError when a row has no allowed key, which always means a
    mask builder produced an invalid matrix.
    """
    scores = _as_matrix(scores, "scores")
    allow = np.ascontiguousarray(allow, dtype=np.bool_)
    if allow.shape != scores.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs allow {allow.shape}")
    empty = ~allow.any(axis=1)
    if empty.any():
        raise ValueError(f"fully masked query row(s): {np.flatnonzero(empty).tolist()}")
    out = np.zeros_like(scores)
    _masked_softmax_kernel(scores, allow, out)
    return out


def rms_norm_rows(x, gamma, eps=1e-6):
    """RMS-normalize each row of ``x``; returns (y, inverse_rms per row)."""
    x = _as_matrix(x, "x")
    gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
    if gamma.shape != (x.shape[1],):
        raise ValueError(f"gamma shape {gamma.shape} does not match width {x.shape[1]}")
    out = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=x.dtype)
    _rms_norm_kernel(x, gamma, x.dtype.type(eps), out, inv)
    return out, inv


def rms_norm(x, gamma, eps):
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    if x.shape != gamma.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {gamma.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    y, _ = rms_norm_rows(x[None, :], gamma, eps)
    return y[0]


def gelu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_kernel(x, out)
    return out


def gelu_grad(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)


def log_softmax_rows(logits):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits):
    return np.exp(log_softmax_rows(logits))


def _check_targets(logits, targets, ignore_marker):
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(f"need one logit row per target: {logits.shape} vs {targets.shape}")
    keep = targets != ignore_marker
    bad = keep & ((targets < 0) | (targets >= logits.shape[1]))
    if bad.any():
        raise ValueError(f"target id out of vocabulary: {targets[bad].tolist()}")
    return targets, keep


def cross_entropy(logits, targets, ignore_marker=-100):
    """Mean negative log-likelihood over non-ignored rows.

    Returns ``(loss, count)``; an empty supervised set gives ``(0.0, 0)``.
    """
    logits = np.asarray(logits)
    targets, keep = _check_targets(logits, targets, ignore_marker)
    count = int(keep.sum())
    if count == 0:
        return 0.0, 0
    rows = np.flatnonzero(keep)
    logp = log_softmax_rows(logits[rows])
    nll = -logp[np.arange(rows.size), targets[rows]]
    return float(nll.sum() / count), count


def cross_entropy_grad(logits, targets, ignore_marker=-100):
    """Gradient of :func:`cross_entropy`'s mean loss with respect to the logits."""
    logits = np.asarray(logits)
    targets, keep = _check_targets(logits, targets, ignore_marker)
    grad = np.zeros_like(logits)
    count = int(keep.sum())
    if count == 0:
        return grad
    rows = np.flatnonzero(keep)
    p = softmax_rows(logits[rows])
    p[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = p / count
    return grad


# --- PRNG -----------------------------------------------------------------
#
# splitmix64: state advances by a fixed odd constant, output is a bijective
# mix of the new state.  Uniform floats take the top 53 bits.
#
# Regression vector, seed 0, first four 64-bit outputs:
#   0xE220A8397B1DCDAF 0x6E789E6AA1B965F4 0x06C45D188009454F 0xF88BB8A8724C81EC


@dataclass(frozen=True)
class PrngState:
    state: int

    def __post_init__(self):
        object.__setattr__(self, "state", self.state & _MASK64)


def _mix(z):
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def prng_next_u64(s: PrngState) -> tuple[PrngState, int]:
    state = (s.state + _GAMMA) & _MASK64
    return PrngState(state), _mix(state)


def prng_next(s: PrngState) -> tuple[PrngState, float]:
    s, z = prng_next_u64(s)
    return s, (z >> 11) * 2.0**-53


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Mutable convenience wrapper around :class:`PrngState`.

    Bulk draws are vectorized but consume the stream exactly as the same
    number of scalar :func:`prng_next` calls would.
    """

    def __init__(self, seed: int | PrngState):
        self.state = seed if isinstance(seed, PrngState) else PrngState(seed)

    def random(self) -> float:
        self.state, x = prng_next(self.state)
        return x

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.random() * n), n - 1)

    def integer_in(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.integer(hi - lo + 1)

    def random_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state.state) + steps * np.uint64(_GAMMA)
            out = _mix_array(states)
        self.state = PrngState(self.state.state + n * _GAMMA)
        return (out >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return (low + (high - low) * self.random_array(n)).reshape(shape)

    def fork(self) -> "Rng":
        """Independent child stream seeded from this one."""
        self.state, z = prng_next_u64(self.state)
        return Rng(z)
