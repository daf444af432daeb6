import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distilled_replay.data import Dataset, concat, make_blobs
from distilled_replay.scenarios import (
    CLASS_INCREMENTAL,
    DOMAIN_INCREMENTAL,
    iterate_single_pass,
    permuted_stream,
    split_stream,
    split_validation,
)


def _images(n_per_class=20, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    return Dataset(rng.random((labels.size, 4, 4)), labels, classes)


def _key(ds):
    return sorted(map(tuple, np.c_[ds.images.reshape(len(ds), -1), ds.labels].tolist()))


def test_permuted_stream_structure():
    train, test = _images(), _images(5, seed=1)
    s = permuted_stream(train, test, T=10, seed=3)
    assert s.T == 10 and s.kind == DOMAIN_INCREMENTAL
    assert s.metadata()["first_experience_identity"] is True
    assert np.array_equal(s[1].test.images, test.images)
    assert _key(concat([s[1].train, s[1].val])) == _key(train)
    for exp in s:
        assert exp.classes_present == frozenset(range(10))
        perm = exp.permutation
        assert np.array_equal(np.sort(perm), np.arange(16))
        inv = np.argsort(perm)
        flat = exp.test.images.reshape(len(test), -1)[:, inv]
        assert np.array_equal(flat.reshape(test.images.shape), test.images)
        assert np.array_equal(exp.test.labels, test.labels)
    assert not np.array_equal(s[2].permutation, s[3].permutation)


def test_permuted_stream_deterministic():
    train, test = _images(), _images(5, seed=1)
    a, b = permuted_stream(train, test, 4, seed=7), permuted_stream(train, test, 4, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.train.images, y.train.images)
        assert np.array_equal(x.val.images, y.val.images)


def test_validation_split_is_disjoint_and_five_percent():
    train = _images(40)
    tr, val = split_validation(train, 0.05, seed=0)
    assert len(val) == 20 and len(tr) == 380
    assert np.bincount(val.labels).tolist() == [2] * 10
    assert not set(_key(tr)) & set(_key(val))


def test_split_stream_partition():
    train, test = _images(), _images(5, seed=1)
    s = split_stream(train, test, 2, seed=0)
    assert s.T == 5 and s.kind == CLASS_INCREMENTAL
    seen = set()
    for exp in s:
        assert len(exp.classes_present) == 2
        assert exp.train.classes() == set(exp.classes_present) == exp.test.classes()
        assert not seen & exp.classes_present
        seen |= exp.classes_present
    union = concat([e.train for e in s] + [e.val for e in s])
    assert _key(union) == _key(train)
    assert _key(concat([e.test for e in s])) == _key(test)


def test_split_stream_custom_order_and_errors():
    train, test = _images(), _images(5, seed=1)
    order = [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]
    s = split_stream(train, test, 2, order=order)
    assert s[1].classes_present == {9, 8}
    assert s.metadata()["class_order"] == order
    with pytest.raises(ValueError):
        split_stream(train, test, 2, order=[0, 0, 1, 2, 3, 4, 5, 6, 7, 8])
    with pytest.raises(ValueError):
        split_stream(train, test, 3)


def test_stream_indexing_is_one_based():
    s = split_stream(_images(), _images(5), 2)
    assert s[1].index == 1 and s[5].index == 5
    with pytest.raises(IndexError):
        s[0]


def test_single_pass_batches():
    ds = make_blobs(4, 25, 2, 0.1, seed=0)
    sizes = [len(y) for _, y in iterate_single_pass(ds, 32, seed=1)]
    assert sizes == [32, 32, 32, 4]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 1000))
def test_single_pass_is_a_permutation(n, batch, seed):
    ds = Dataset(np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=int), 1)
    batches = list(iterate_single_pass(ds, batch, seed))
    seen = np.concatenate([x[:, 0] for x, _ in batches])
    assert sorted(seen.tolist()) == list(range(n))
    assert all(len(y) == batch for _, y in batches[:-1])
    again = np.concatenate([x[:, 0] for x, _ in iterate_single_pass(ds, batch, seed)])
    assert np.array_equal(seen, again)
