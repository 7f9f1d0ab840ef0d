"""Toy pre-norm decoder with explicit masks, position ids and KV cache.

Absolute learned position embeddings let the dual-stream layout reuse a
clean position id for its noisy copy and let the quadratic decoder feed
overlapping position runs.  Vision inputs are payload vectors that bypass
the token table.

Row ``i`` of the logits is the distribution for position ``i + 1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .kvcache import KvCache
from .masks import MaskMatrix

NORM_EPS = 1e-6
CACHE_POLICIES = ("none", "read_only", "read_write")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    max_position: int = 512
    ffn_dim: int = 256

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave room for EOS and MASK")
        if min(self.model_dim, self.num_heads, self.num_layers, self.max_position, self.ffn_dim) < 1:
            raise ValueError("model dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def as_tuple(self) -> tuple[int, ...]:
        return (self.vocab_size, self.model_dim, self.num_heads, self.num_layers,
                self.max_position, self.ffn_dim)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in checkpoint order."""
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_position, d)}
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,), p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d),
            p + "wo": (d, d), p + "ffn_norm": (d,), p + "w1": (d, f), p + "w2": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.tensors["lm_head"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def new_cache(self, capacity: int) -> KvCache:
        return KvCache(self.cfg.num_layers, self.cfg.model_dim, capacity, self.dtype)

    def forward(self, inputs, position_ids, mask, cache=None, cache_policy="none"):
        return forward(self, inputs, position_ids, mask, cache, cache_policy)

    def equal(self, other: "ModelParams") -> bool:
        return (self.cfg == other.cfg and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


@dataclass
class ForwardOutput:
    logits: np.ndarray
    hidden: np.ndarray
    cache: KvCache | None = None
    acts: dict | None = field(default=None, repr=False)


def init_params(cfg: ModelConfig, seed: int, dtype=nx.SINGLE) -> ModelParams:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); norm gains start at 1."""
    rng = nx.Rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(shape, -a, a).astype(dtype)
    return ModelParams(cfg, tensors)


def constant_logits_params(cfg: ModelConfig, token: int, dtype=nx.SINGLE, margin=10.0) -> ModelParams:
    """Weights whose logits favour ``token`` at every text position, whatever the mask."""
    tensors = {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg).items()}
    for name in tensors:
        if name.endswith("norm"):
            tensors[name][:] = 1
    tensors["pos_emb"][:, 0] = 1
    tensors["lm_head"][0, token] = margin
    return ModelParams(cfg, tensors)


def _embed(params: ModelParams, inputs: Sequence, position_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.cfg
    t = params.tensors
    x = np.empty((len(inputs), cfg.model_dim), dtype=params.dtype)
    token_ids = np.full(len(inputs), -1, dtype=np.int64)
    for i, item in enumerate(inputs):
        if isinstance(item, (int, np.integer)):
            if not 0 <= item < cfg.vocab_size:
                raise ValueError(f"token id {item} outside vocabulary")
            token_ids[i] = item
            x[i] = t["tok_emb"][item]
        else:
            vec = np.asarray(item)
            if vec.shape != (cfg.model_dim,):
                raise ValueError(f"vision payload must have shape ({cfg.model_dim},), got {vec.shape}")
            x[i] = vec
    x += t["pos_emb"][position_ids]
    return x, token_ids


def forward(params: ModelParams, inputs: Sequence, position_ids, mask: MaskMatrix,
            cache: KvCache | None = None, cache_policy: str = "none",
            keep_activations: bool = False) -> ForwardOutput:
    """Run the decoder over ``inputs`` (token ids or payload vectors).

    With ``cache_policy`` ``read_only`` or ``read_write`` the cached rows
    precede the new keys; ``read_write`` appends this pass's keys/values.
    """
    cfg = params.cfg
    t = params.tensors
    if cache_policy not in CACHE_POLICIES:
        raise ValueError(f"unknown cache policy {cache_policy!r}")
    use_cache = cache is not None and cache_policy != "none"
    if cache_policy != "none" and cache is None:
        raise ValueError(f"cache_policy {cache_policy!r} needs a cache")
    n = len(inputs)
    position_ids = np.asarray(position_ids, dtype=np.int64)
    past = cache.len if use_cache else 0
    if position_ids.shape != (n,):
        raise ValueError("one position id per input required")
    if n and (position_ids.min() < 0 or position_ids.max() >= cfg.max_position):
        raise ValueError(f"position id outside [0, {cfg.max_position})")
    if mask.q_len != n or mask.k_len != past + n:
        raise ValueError(f"mask {mask.q_len}x{mask.k_len} does not fit {n} queries over {past + n} keys")

    x, token_ids = _embed(params, inputs, position_ids)
    hd = cfg.head_dim
    scale = params.dtype.type(1.0 / np.sqrt(hd))
    acts = {"token_ids": token_ids, "position_ids": position_ids, "layers": []} if keep_activations else None
    new_k, new_v = [], []

    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        xn, inv1 = nx.rms_norm_rows(x, t[p + "attn_norm"], NORM_EPS)
        q = nx.matmul(xn, t[p + "wq"])
        k = nx.matmul(xn, t[p + "wk"])
        v = nx.matmul(xn, t[p + "wv"])
        new_k.append(k)
        new_v.append(v)
        if use_cache:
            ck, cv = cache.layer(layer)
            k_all, v_all = np.concatenate([ck, k]), np.concatenate([cv, v])
        else:
            k_all, v_all = k, v
        o = np.empty_like(q)
        probs = []
        for h in range(cfg.num_heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = nx.matmul(q[:, sl], k_all[:, sl].T) * scale
            pr = nx.masked_softmax(s, mask.allow)
            o[:, sl] = nx.matmul(pr, v_all[:, sl])
            probs.append(pr)
        x_mid = x + nx.matmul(o, t[p + "wo"])
        hn, inv2 = nx.rms_norm_rows(x_mid, t[p + "ffn_norm"], NORM_EPS)
        u = nx.matmul(hn, t[p + "w1"])
        gu = nx.gelu(u)
        x_out = x_mid + nx.matmul(gu, t[p + "w2"])
        if keep_activations:
            acts["layers"].append(dict(x=x, xn=xn, inv1=inv1, q=q, k=k, v=v, probs=probs, o=o,
                                       x_mid=x_mid, hn=hn, inv2=inv2, u=u, gu=gu))
        x = x_out

    hidden, invf = nx.rms_norm_rows(x, t["final_norm"], NORM_EPS)
    logits = nx.matmul(hidden, t["lm_head"])
    if keep_activations:
        acts.update(x_final=x, invf=invf, hidden=hidden)
    if use_cache and cache_policy == "read_write":
        cache.append(new_k, new_v)
    return ForwardOutput(logits, hidden, cache if use_cache else None, acts)


def _rms_norm_backward(dy, x, gamma, inv):
    z = dy * gamma
    d = x.shape[1]
    dx = inv[:, None] * z - x * (inv**3)[:, None] * ((z * x).sum(axis=1, keepdims=True) / d)
    dgamma = (dy * x * inv[:, None]).sum(axis=0)
    return dx, dgamma


def backward(params: ModelParams, acts: dict, dlogits: np.ndarray, dhidden: np.ndarray | None = None) -> dict:
    """Gradients of a scalar loss given d(loss)/d(logits) from a cache-free forward."""
    cfg = params.cfg
    t = params.tensors
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    grads = {name: np.zeros_like(v) for name, v in t.items()}

    hidden = acts["hidden"]
    grads["lm_head"] = hidden.T @ dlogits
    dh = dlogits @ t["lm_head"].T
    if dhidden is not None:
        dh = dh + dhidden
    dx, grads["final_norm"] = _rms_norm_backward(dh, acts["x_final"], t["final_norm"], acts["invf"])

    for layer in reversed(range(cfg.num_layers)):
        p = f"layers.{layer}."
        a = acts["layers"][layer]
        # feed-forward branch
        grads[p + "w2"] = a["gu"].T @ dx
        du = (dx @ t[p + "w2"].T) * nx.gelu_grad(a["u"])
        grads[p + "w1"] = a["hn"].T @ du
        dhn = du @ t[p + "w1"].T
        dxn2, grads[p + "ffn_norm"] = _rms_norm_backward(dhn, a["x_mid"], t[p + "ffn_norm"], a["inv2"])
        dx_mid = dx + dxn2
        # attention branch
        grads[p + "wo"] = a["o"].T @ dx_mid
        do = dx_mid @ t[p + "wo"].T
        dq = np.empty_like(a["q"])
        dk = np.empty_like(a["k"])
        dv = np.empty_like(a["v"])
        for h in range(cfg.num_heads):
            sl = slice(h * hd, (h + 1) * hd)
            pr = a["probs"][h]
            dp = do[:, sl] @ a["v"][:, sl].T
            dv[:, sl] = pr.T @ do[:, sl]
            ds = pr * (dp - (dp * pr).sum(axis=1, keepdims=True)) * scale
            dq[:, sl] = ds @ a["k"][:, sl]
            dk[:, sl] = ds.T @ a["q"][:, sl]
        xn = a["xn"]
        grads[p + "wq"] = xn.T @ dq
        grads[p + "wk"] = xn.T @ dk
        grads[p + "wv"] = xn.T @ dv
        dxn = dq @ t[p + "wq"].T + dk @ t[p + "wk"].T + dv @ t[p + "wv"].T
        dxn1, grads[p + "attn_norm"] = _rms_norm_backward(dxn, a["x"], t[p + "attn_norm"], a["inv1"])
        dx = dx_mid + dxn1

    tok = acts["token_ids"]
    is_tok = tok >= 0
    np.add.at(grads["tok_emb"], tok[is_tok], dx[is_tok])
    np.add.at(grads["pos_emb"], acts["position_ids"], dx)
    return grads


# --- checkpoint I/O --------------------------------------------------------

MAGIC = b"FDBD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write ``FDBD`` | u32 version | six u32 config fields | tensors in fixed order.

    Each tensor: u32 name length, name bytes, u32 rank, u32 dims, float32
    data; all little-endian.
    """
    buf = [MAGIC, struct.pack("<I", VERSION), struct.pack("<6I", *params.cfg.as_tuple())]
    for name, shape in param_shapes(params.cfg).items():
        arr = np.asarray(params.tensors[name], dtype="<f4")
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        encoded = name.encode()
        buf += [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", len(shape)),
                struct.pack(f"<{len(shape)}I", *shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[off: off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic; not an FDBD checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig(*struct.unpack("<6I", take(24)))
    except ValueError as exc:
        raise CheckpointError(f"invalid config: {exc}") from exc
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        (n,) = struct.unpack("<I", take(4))
        got = take(n).decode()
        if got != name:
            raise CheckpointError(f"expected tensor {name}, found {got}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if dims != shape:
            raise CheckpointError(f"tensor {name} has dims {dims}, expected {shape}")
        count = int(np.prod(dims))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    if off != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return ModelParams(cfg, tensors)
