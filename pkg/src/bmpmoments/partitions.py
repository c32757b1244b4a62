"""Set partitions in restricted-growth-string order."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

MAX_GROUND = 12


def restricted_growth_strings(n: int) -> Iterator[tuple[int, ...]]:
    """Yield all restricted growth strings of length ``n`` in lexicographic order.

    ``a[0] = 0`` and ``a[i] <= 1 + max(a[:i])``; each string labels a set
    partition by block index.
    """
    if n == 0:
        yield ()
        return
    a = [0] * n
    b = [1] * n  # b[i] = 1 + max(a[:i])
    while True:
        yield tuple(a)
        i = n - 1
        while i > 0 and a[i] == b[i]:
            i -= 1
        if i == 0:
            return
        a[i] += 1
        for j in range(i + 1, n):
            a[j] = 0
            b[j] = max(b[j - 1], a[j - 1] + 1)


@lru_cache(maxsize=None)
def bell(n: int) -> int:
    """Bell number via the Bell triangle."""
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


@dataclass(frozen=True)
class PartitionSet:
    ground: tuple
    partitions: tuple[tuple[frozenset, ...], ...]

    @property
    def proper(self) -> tuple[tuple[frozenset, ...], ...]:
        """Partitions other than the one-block partition."""
        return tuple(p for p in self.partitions if len(p) >= 2)

    def __len__(self) -> int:
        return len(self.partitions)


@lru_cache(maxsize=64)
def _partitions_of(ground: tuple) -> PartitionSet:
    parts = []
    for rgs in restricted_growth_strings(len(ground)):
        blocks = [[] for _ in range(max(rgs) + 1)] if rgs else []
        for label, b in zip(ground, rgs):
            blocks[b].append(label)
        parts.append(tuple(frozenset(b) for b in blocks))
    return PartitionSet(ground, tuple(parts))


def enumerate_partitions(A: Sequence) -> PartitionSet:
    ground = tuple(A)
    if not 1 <= len(ground) <= MAX_GROUND:
        raise ValueError(f"ground set size must be in [1, {MAX_GROUND}], got {len(ground)}")
    if len(set(ground)) != len(ground):
        raise ValueError("ground set has repeated labels")
    return _partitions_of(ground)


@lru_cache(maxsize=None)
def mask_partitions(mask: int) -> tuple[tuple[int, ...], ...]:
    """Proper partitions of the bit set ``mask``, blocks given as bit masks."""
    labels = [i for i in range(mask.bit_length()) if mask >> i & 1]
    out = []
    for sigma in enumerate_partitions(labels).proper:
        out.append(tuple(sum(1 << i for i in block) for block in sigma))
    return tuple(out)
