import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockdiff.kvcache import CacheCapacityError, KvCache


def rows(n, start=0, layers=2, dim=3):
    base = np.arange(start, start + n, dtype=np.float64)[:, None] * np.ones(dim)
    return [base + 1000 * layer for layer in range(layers)], [-(base + 1000 * layer) for layer in range(layers)]


def filled(n, capacity=64):
    c = KvCache(2, 3, capacity, np.float64)
    c.append(*rows(n))
    return c


def test_append_to_empty():
    assert filled(3).len == 3


def test_append_twice_preserves_order():
    c = KvCache(2, 3, 8, np.float64)
    c.append(*rows(2, 0))
    c.append(*rows(2, 2))
    assert c.len == 4
    assert c.layer(1)[0][:, 0].tolist() == [1000, 1001, 1002, 1003]


def test_append_mismatched_row_counts():
    c = KvCache(2, 3, 8)
    k, v = rows(2)
    k[1] = k[1][:1]
    with pytest.raises(ValueError):
        c.append(k, v)


def test_append_wrong_layer_count():
    with pytest.raises(ValueError):
        KvCache(2, 3, 8).append(*rows(2, layers=1))


def test_capacity_exceeded():
    c = filled(3, capacity=4)
    with pytest.raises(CacheCapacityError):
        c.append(*rows(2))
    assert c.len == 3


def test_crop_noop_and_partial_and_zero():
    c = filled(10)
    before = c.snapshot()
    c.crop(10)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(before, c.snapshot()))
    c.crop(7)
    assert c.len == 7 and np.array_equal(c.layer(0)[0], before[0][0][:7])
    c.crop(0)
    assert c.len == 0 and c.layer(0)[0].shape == (0, 3)


def test_crop_beyond_len():
    with pytest.raises(ValueError):
        filled(3).crop(4)


def test_keep_stride_index_oracle():
    c = filled(10)
    orig = c.snapshot()
    c.keep_stride(4, 3, 0)
    assert c.len == 6
    expect_rows = [0, 1, 2, 3, 4, 7]
    for layer in range(2):
        assert np.array_equal(c.layer(layer)[0], orig[layer][0][expect_rows])
        assert np.array_equal(c.layer(layer)[1], orig[layer][1][expect_rows])


def test_keep_stride_group_one_identity():
    c = filled(9)
    orig = c.snapshot()
    c.keep_stride(2, 1, 0)
    assert np.array_equal(c.layer(0)[0], orig[0][0])


def test_keep_stride_empty_tail():
    c = filled(5)
    c.keep_stride(5, 4, 2)
    assert c.len == 5


def test_keep_stride_non_multiple_tail():
    with pytest.raises(ValueError):
        filled(10).keep_stride(4, 4, 0)


def test_keep_stride_bad_index():
    with pytest.raises(ValueError):
        filled(6).keep_stride(0, 3, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20))
def test_crop_after_append_restores(n, m):
    c = filled(n)
    before = c.snapshot()
    c.append(*rows(m, 100))
    c.crop(n)
    after = c.snapshot()
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(before, after))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10), st.integers(1, 5), st.integers(0, 6), st.data())
def test_keep_stride_closed_form(base, group, ngroups, data):
    keep = data.draw(st.integers(0, group - 1))
    c = filled(base + group * ngroups)
    orig = c.snapshot()
    c.keep_stride(base, group, keep)
    idx = list(range(base)) + [base + g * group + keep for g in range(ngroups)]
    assert idx == sorted(idx)
    for layer in range(2):
        assert np.array_equal(c.layer(layer)[0], orig[layer][0][idx])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["append", "crop", "stride"]), st.integers(0, 6)), max_size=25))
def test_random_operation_sequences_keep_layers_consistent(ops):
    c = KvCache(3, 2, 500, np.float64)
    model = [[] for _ in range(3)]  # list-of-rows reference
    counter = 0
    for op, arg in ops:
        if op == "append":
            ks = [np.full((arg, 2), counter + 1000.0 * layer) + np.arange(arg)[:, None] for layer in range(3)]
            counter += arg
            c.append(ks, [k.copy() for k in ks])
            for layer in range(3):
                model[layer] += list(ks[layer])
        elif op == "crop":
            n = min(arg, c.len)
            c.crop(n)
            model = [m[:n] for m in model]
        else:
            group = arg + 1
            base = c.len % group
            c.keep_stride(base, group, 0)
            model = [m[:base] + m[base::group] for m in model]
        for layer in range(3):
            assert c.layer(layer)[0].shape[0] == c.len == len(model[layer])
            if model[layer]:
                assert np.array_equal(c.layer(layer)[0], np.array(model[layer]))
