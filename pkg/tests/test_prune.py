import numpy as np
import pytest
from hypothesis import given, strategies as st

from kvcomp.errors import CorruptionError, InvalidArgumentError
from kvcomp.prune import PrunedTokens, prune, pruning_ratio, reconstruct_pruned

int8s = st.lists(st.integers(-128, 127), min_size=1, max_size=64)


def brute_force_keep(values, th):
    return [v != 0 and abs(v) >= th for v in values]


def test_prune_example():
    p = prune([5, -2, 0, 12], 3)
    assert p.index.tolist() == brute_force_keep([5, -2, 0, 12], 3) == [True, False, False, True]
    assert p.kept_values.tolist() == [5, 12]
    assert pruning_ratio(p) == 0.5
    assert reconstruct_pruned(p).tolist() == [5, 0, 0, 12]


def test_tie_is_kept():
    p = prune([3, -3], 3)
    assert p.index.tolist() == [True, True]


def test_threshold_zero_only_drops_literal_zeros():
    v = [0, 1, -1, 0, 127, -128]
    p = prune(v, 0)
    assert p.index.tolist() == [x != 0 for x in v]
    assert p.kept_values.tolist() == [1, -1, 127, -128]


def test_ratio_extremes():
    assert pruning_ratio(prune([1, 2, 3], 0)) == 0.0
    assert pruning_ratio(prune([1, 2, 3], 100)) == 1.0
    assert reconstruct_pruned(prune([1, 2, 3], 0)).tolist() == [1, 2, 3]
    with pytest.raises(InvalidArgumentError):
        pruning_ratio(prune([], 1))
    with pytest.raises(InvalidArgumentError):
        prune([1], -1)


def test_input_untouched():
    v = np.array([5, -2, 0, 12], dtype=np.int8)
    prune(v, 3)
    assert v.tolist() == [5, -2, 0, 12]


@given(int8s, st.integers(0, 130))
def test_reconstruct_matches_oracle(values, th):
    p = prune(values, th)
    expected = [v if keep else 0 for v, keep in zip(values, brute_force_keep(values, th))]
    assert reconstruct_pruned(p).tolist() == expected
    assert int(p.index.sum()) == p.kept_values.size
    assert p.index.size == p.original_len == len(values)


@given(int8s, st.integers(0, 130), st.integers(0, 130))
def test_monotone_in_threshold(values, a, b):
    lo, hi = min(a, b), max(a, b)
    kept_lo = prune(values, lo).index
    kept_hi = prune(values, hi).index
    assert not np.any(kept_hi & ~kept_lo)


@given(st.lists(st.booleans(), max_size=80), st.integers(-3, 3))
def test_bitmap_length_consistency_fuzz(bits, delta):
    index = np.array(bits, dtype=bool)
    n = max(int(index.sum()) + delta, 0)
    p = PrunedTokens(index, np.ones(n, dtype=np.int8), index.size)
    if n == int(index.sum()):
        assert reconstruct_pruned(p)[index].tolist() == [1] * n
    else:
        with pytest.raises(CorruptionError):
            reconstruct_pruned(p)
