"""Dataset partitioning and epoch scheduling.

A partition splits the N example indices into m disjoint batches of size B
(B must divide N). Epoch schedules order those batches: in dataset order,
seeded-shuffled, or palindromically (forward then reversed, which cancels the
order-dependent variance of one pass at second order in the step size).
Enumeration helpers make small-m expectations exact: all m! batch orderings,
or all C(N, B) batch compositions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations, permutations
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset

__all__ = [
    "BatchPartition",
    "EpochSchedule",
    "make_partition",
    "enumerate_orderings",
    "sample_ordering",
    "palindromic_schedule",
    "enumerate_all_batches",
    "ORDERING_CAP",
    "BATCH_ENUM_CAP",
]

ORDERING_CAP = 40320  # 8!
BATCH_ENUM_CAP = 10**6


@dataclass(frozen=True)
class BatchPartition:
    """m disjoint index batches of size B covering 0..N-1."""

    batches: tuple[tuple[int, ...], ...]
    n: int
    batch_size: int

    def __post_init__(self):
        m = len(self.batches)
        if m * self.batch_size != self.n:
            raise ValueError("partition does not cover the dataset")
        flat = sorted(i for b in self.batches for i in b)
        if flat != list(range(self.n)):
            raise ValueError("batches must be disjoint and cover all indices")
        if any(len(b) != self.batch_size for b in self.batches):
            raise ValueError("all batches must have the same size")

    @property
    def m(self) -> int:
        return len(self.batches)

    def batch(self, k: int) -> np.ndarray:
        return np.asarray(self.batches[k], dtype=np.int64)

    def as_arrays(self) -> list[np.ndarray]:
        return [self.batch(k) for k in range(self.m)]


@dataclass(frozen=True)
class EpochSchedule:
    """Order in which a partition's batches are visited."""

    ordering: tuple[int, ...]
    kind: str  # "in_order" | "shuffled" | "palindromic"
    seed: int | None = None

    def __post_init__(self):
        m = len(set(self.ordering))
        if self.kind == "palindromic":
            if len(self.ordering) != 2 * m:
                raise ValueError("palindromic schedule must have length 2m")
            for i in range(len(self.ordering)):
                if self.ordering[i] != self.ordering[len(self.ordering) - 1 - i]:
                    raise ValueError("palindromic schedule must be its own reverse")
        else:
            if sorted(self.ordering) != list(range(m)):
                raise ValueError("ordering must be a permutation of 0..m-1")


def make_partition(
    dataset: Dataset | int, batch_size: int, shuffle_seed: int | None = None
) -> BatchPartition:
    """Split indices 0..N-1 into consecutive blocks of ``batch_size``.

    ``dataset`` may be a Dataset or a bare example count. With a seed, the
    indices are permuted by a seeded uniform shuffle before splitting.
    """
    n = dataset if isinstance(dataset, int) else dataset.n
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if n % batch_size != 0:
        raise ValueError(
            f"batch size must divide dataset size (N={n}, B={batch_size})"
        )
    idx = np.arange(n, dtype=np.int64)
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(idx)
    batches = tuple(
        tuple(int(i) for i in idx[s : s + batch_size])
        for s in range(0, n, batch_size)
    )
    return BatchPartition(batches=batches, n=n, batch_size=batch_size)


def enumerate_orderings(m: int, cap: int = ORDERING_CAP) -> Iterator[tuple[int, ...]]:
    """All m! batch orderings in lexicographic order; refuses above ``cap``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if math.factorial(m) > cap:
        raise ValueError(
            f"m={m} has {math.factorial(m)} orderings, above the cap of {cap}; "
            "switch to sample_ordering"
        )
    return iter(permutations(range(m)))


def sample_ordering(m: int, rng: np.random.Generator) -> tuple[int, ...]:
    """One uniform random ordering of 0..m-1."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return tuple(int(i) for i in rng.permutation(m))


def palindromic_schedule(m: int) -> EpochSchedule:
    """Forward pass then the same batches in reverse: 0..m-1, m-1..0."""
    if m < 1:
        raise ValueError("m must be >= 1")
    fwd = tuple(range(m))
    return EpochSchedule(ordering=fwd + fwd[::-1], kind="palindromic")


def enumerate_all_batches(
    n: int, batch_size: int, cap: int = BATCH_ENUM_CAP
) -> Iterator[tuple[int, ...]]:
    """All C(N, B) index subsets of size B; refuses above ``cap``."""
    if not 1 <= batch_size <= n:
        raise ValueError("need 1 <= batch_size <= n")
    count = math.comb(n, batch_size)
    if count > cap:
        raise ValueError(
            f"C({n},{batch_size}) = {count} subsets exceeds the cap of {cap}"
        )
    return iter(combinations(range(n), batch_size))
