import numpy as np
import pytest

from blockdiff import numerics as nx
from blockdiff.masks import MaskMatrix, causal_mask, draft_mask
from blockdiff.model import (MAGIC, CheckpointError, ModelConfig, constant_logits_params, forward,
                             init_params, load_checkpoint, param_shapes, save_checkpoint)
from oracles import reference_attention_forward

SMALL = ModelConfig(vocab_size=20, model_dim=16, num_heads=2, num_layers=2, max_position=64, ffn_dim=32)


def small(seed=0, dtype=nx.DOUBLE):
    return init_params(SMALL, seed, dtype)


def test_config_reserved_ids():
    assert (SMALL.mask_id, SMALL.eos_id) == (19, 18)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=10, num_heads=4)


def test_init_deterministic():
    assert small(3).equal(small(3))


def test_init_seed_sensitive():
    assert not small(1).equal(small(2))


def test_init_finite_and_bounded():
    p = small(4)
    for name, shape in param_shapes(SMALL).items():
        t = p.tensors[name]
        assert np.isfinite(t).all() and t.shape == shape
        if len(shape) == 2:
            assert np.abs(t).max() <= np.sqrt(6 / (shape[0] + shape[1]))


def test_forward_matches_reference_implementation():
    p = small(5)
    rng = np.random.default_rng(0)
    inputs = [int(x) for x in rng.integers(0, 18, 7)]
    inputs[3] = rng.uniform(-1, 1, 16)  # a vision payload
    pos = np.arange(7)
    allow = rng.random((7, 7)) < 0.6
    allow[np.arange(7), np.arange(7)] = True
    got = forward(p, inputs, pos, MaskMatrix(allow)).logits
    assert np.abs(got - reference_attention_forward(p, inputs, pos, allow)).max() < 1e-10


def test_cache_equivalence_split_prefix():
    p = small(6)
    toks = [int(x) for x in np.random.default_rng(1).integers(0, 18, 12)]
    full = forward(p, toks, np.arange(12), causal_mask(12)).logits
    for a in (1, 5, 11):
        cache = p.new_cache(12)
        forward(p, toks[:a], np.arange(a), causal_mask(a), cache, "read_write")
        tail = forward(p, toks[a:], np.arange(a, 12), causal_mask(12 - a, a), cache, "read_write").logits
        assert np.abs(tail - full[a:]).max() <= 1e-10
        assert cache.len == 12


def test_single_token_mask_irrelevant():
    p = small(7)
    a = forward(p, [3], [0], causal_mask(1)).logits
    b = forward(p, [3], [0], draft_mask(1)).logits
    assert np.array_equal(a, b)


def test_read_only_leaves_cache():
    p = small(8)
    cache = p.new_cache(16)
    forward(p, [1, 2, 3], np.arange(3), causal_mask(3), cache, "read_write")
    snap = cache.snapshot()
    forward(p, [4, 5], [3, 4], draft_mask(2, 3), cache, "read_only")
    assert cache.len == 3
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(snap, cache.snapshot()))


def test_position_overflow():
    with pytest.raises(ValueError):
        forward(small(), [1], [64], causal_mask(1))


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        forward(small(), [1, 2], [0, 1], causal_mask(3))


def test_token_out_of_vocab():
    with pytest.raises(ValueError):
        forward(small(), [20], [0], causal_mask(1))


def test_bad_vision_payload_shape():
    with pytest.raises(ValueError):
        forward(small(), [np.zeros(5)], [0], causal_mask(1))


def test_mask_sensitivity():
    """Flipping a used key off changes that query's logits."""
    rng = np.random.default_rng(9)
    changed = 0
    for trial in range(20):
        p = small(trial)
        n = 6
        toks = [int(x) for x in rng.integers(0, 18, n)]
        allow = np.tri(n, dtype=bool)
        q = int(rng.integers(1, n))
        k = int(rng.integers(0, q))
        base = forward(p, toks, np.arange(n), MaskMatrix(allow)).logits
        allow2 = allow.copy()
        allow2[q, k] = False
        alt = forward(p, toks, np.arange(n), MaskMatrix(allow2)).logits
        changed += not np.allclose(base[q], alt[q], atol=1e-12)
        assert np.array_equal(base[:q], alt[:q])
    assert changed == 20


def test_constant_params_favour_token_everywhere():
    p = constant_logits_params(SMALL, 4)
    rng = np.random.default_rng(2)
    toks = [int(x) for x in rng.integers(0, 20, 9)]
    logits = forward(p, toks, np.arange(9), draft_mask(9)).logits
    assert (logits.argmax(axis=1) == 4).all()


# --- checkpoint -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, 11)
    save_checkpoint(p, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.equal(p) and back.cfg == SMALL


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(init_params(SMALL, 0), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:4] == MAGIC == b"FDBD"
    assert np.frombuffer(data[4:32], "<u4").tolist() == [1, 20, 16, 2, 2, 64, 32]
    assert data[32:36] == (7).to_bytes(4, "little") and data[36:43] == b"tok_emb"


def test_checkpoint_bad_magic(tmp_path):
    save_checkpoint(init_params(SMALL, 0), tmp_path / "m.ckpt")
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    data[0] ^= 0xFF
    (tmp_path / "m.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")


@pytest.mark.parametrize("version", [0, 2, 7])
def test_checkpoint_other_versions_rejected(tmp_path, version):
    save_checkpoint(init_params(SMALL, 0), tmp_path / "m.ckpt")
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    data[4:8] = version.to_bytes(4, "little")
    (tmp_path / "m.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(init_params(SMALL, 0), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_trailing_bytes(tmp_path):
    save_checkpoint(init_params(SMALL, 0), tmp_path / "m.ckpt")
    with open(tmp_path / "m.ckpt", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")
