import pytest
from hypothesis import given, strategies as st

from bmpmoments.partitions import (
    bell,
    enumerate_partitions,
    mask_partitions,
    restricted_growth_strings,
)
from oracles import insertion_partitions


def _canon(part):
    return frozenset(frozenset(b) for b in part)


class TestCounts:
    @pytest.mark.parametrize("k, expected", [(1, 0), (2, 1), (3, 4), (4, 14), (5, 51), (6, 202), (7, 876), (8, 4139)])
    def test_proper_partition_counts(self, k, expected):
        assert len(enumerate_partitions(range(k)).proper) == expected

    def test_bell_numbers(self):
        assert [bell(k) for k in range(9)] == [1, 1, 2, 5, 15, 52, 203, 877, 4140]

    def test_single_label_has_no_proper_partition(self):
        ps = enumerate_partitions(["a"])
        assert len(ps) == 1 and ps.proper == ()


class TestEnumeration:
    @pytest.mark.parametrize("k", range(1, 7))
    def test_matches_insertion_oracle(self, k):
        ours = {_canon(p) for p in enumerate_partitions(range(k)).partitions}
        ref = {_canon(p) for p in insertion_partitions(range(k))}
        assert ours == ref

    def test_rgs_order_is_lexicographic(self):
        strings = list(restricted_growth_strings(4))
        assert strings == sorted(strings)
        assert strings[0] == (0, 0, 0, 0) and strings[-1] == (0, 1, 2, 3)

    def test_deterministic(self):
        assert enumerate_partitions("abcd").partitions == enumerate_partitions("abcd").partitions

    def test_mask_partitions_blocks_cover_mask(self):
        for sigma in mask_partitions(0b1011):
            acc = 0
            for b in sigma:
                assert acc & b == 0
                acc |= b
            assert acc == 0b1011

    @pytest.mark.parametrize("bad", [[], list(range(13)), [1, 1]])
    def test_rejects_bad_ground_sets(self, bad):
        with pytest.raises(ValueError):
            enumerate_partitions(bad)


@given(st.integers(1, 8))
def test_blocks_are_disjoint_and_cover(k):
    for part in enumerate_partitions(range(k)).partitions:
        seen = [x for b in part for x in b]
        assert sorted(seen) == list(range(k))


@given(st.integers(1, 7))
def test_partitions_into_two_blocks(k):
    # S(k, 2) = 2^{k-1} - 1
    two = [p for p in enumerate_partitions(range(k)).partitions if len(p) == 2]
    assert len(two) == 2 ** (k - 1) - 1


def test_partitions_into_singletons_unique():
    k = 5
    single = [p for p in enumerate_partitions(range(k)).partitions if len(p) == k]
    assert len(single) == 1
