from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zigzag.data import (
    DEFAULT_DEPTHS,
    PasskeySpec,
    dataset_from_text,
    dataset_to_text,
    load_dataset,
    make_dataset,
    make_sample,
    passkey_range,
    save_dataset,
)
from zigzag.errors import InputError


def passkey_positions(sample, vocab=64):
    lo, _ = passkey_range(vocab)
    return np.flatnonzero(sample.tokens[: -sample.response_len] >= lo).tolist()


def test_depth_zero_inserts_at_start():
    s = make_sample(PasskeySpec(32, 4, 0.0, 4, seed=1))
    assert passkey_positions(s) == [0, 1, 2, 3]


def test_depth_one_ends_before_response():
    s = make_sample(PasskeySpec(32, 4, 1.0, 4, seed=1))
    assert passkey_positions(s) == [24, 25, 26, 27]


def test_midpoint_insertion_and_uniqueness():
    spec = PasskeySpec(64, 4, 0.5, 4, seed=3)
    assert spec.insert_at == 28
    s = make_sample(spec)
    key = s.tokens[28:32]
    context = s.tokens[:60].tolist()
    assert all(context.count(int(t)) == 1 for t in key)
    np.testing.assert_array_equal(s.tokens[60:], key)


def test_response_repeats_and_truncates():
    s = make_sample(PasskeySpec(20, 3, 0.5, 5, seed=0))
    key = s.tokens[passkey_positions(s)]
    assert s.tokens[-5:].tolist() == [*key, *key[:2]]


@pytest.mark.parametrize("kwargs", [dict(context_len=6, passkey_len=4, response_len=4),
                                    dict(depth=1.5), dict(passkey_len=0), dict(vocab=4, passkey_len=3)])
def test_invalid_specs(kwargs):
    with pytest.raises(InputError):
        PasskeySpec(**kwargs)


def test_dataset_cycles_depths():
    ds = make_dataset(10, 32, DEFAULT_DEPTHS, seed=0)
    assert [s.depth for s in ds] == [*DEFAULT_DEPTHS, 0.1]


def test_dataset_reproducible():
    a = dataset_to_text(make_dataset(5, 32, seed=9))
    b = dataset_to_text(make_dataset(5, 32, seed=9))
    c = dataset_to_text(make_dataset(5, 32, seed=10))
    assert a == b and a != c


def test_depth_histogram_uniform():
    counts = Counter(s.depth for s in make_dataset(99, 24, DEFAULT_DEPTHS, seed=2))
    assert set(counts.values()) == {11}
    with pytest.raises(InputError):
        make_dataset(0, 24)


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 80), st.integers(1, 4), st.integers(1, 4), st.floats(0, 1), st.integers(0, 2**32))
def test_sample_invariants(T, P, R, depth, seed):
    s = make_sample(PasskeySpec(T, P, depth, R, seed))
    assert len(s.tokens) == T
    lo, hi = passkey_range(64)
    start = PasskeySpec(T, P, depth, R, seed).insert_at
    filler = np.delete(s.tokens[: T - R], range(start, start + P))
    assert np.all(filler < lo)
    assert np.all((s.tokens[start:start + P] >= lo) & (s.tokens[start:start + P] < hi))


def test_text_round_trip(tmp_path):
    ds = make_dataset(4, 16, seed=1)
    save_dataset(ds, tmp_path / "d.txt")
    first = (tmp_path / "d.txt").read_text().splitlines()[0]
    assert first.startswith("16 4 0.1 : ")
    back = load_dataset(tmp_path / "d.txt")
    assert dataset_to_text(back) == dataset_to_text(ds)
    with pytest.raises(InputError):
        dataset_from_text("5 1 0.1 : 1 2 3\n")
    with pytest.raises(InputError):
        load_dataset(tmp_path / "missing.txt")
