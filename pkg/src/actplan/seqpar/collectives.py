"""In-process collectives over simulated ranks.

A "distributed" tensor is a list with one numpy array per rank. Reductions
always add rank 0, then 1, ... so results do not depend on evaluation
order and ``all_reduce`` is bit-identical to ``all_gather(reduce_scatter())``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AXES = {"sequence": 0, "hidden": -1}


class CollectiveError(ValueError):
    pass


@dataclass(frozen=True)
class CommRecord:
    op: str  # all_gather | reduce_scatter | all_reduce
    category: str
    elements: int  # logical (full) tensor size
    ranks: int


@dataclass
class CommLog:
    records: list[CommRecord] = field(default_factory=list)

    def add(self, op: str, category: str, elements: int, ranks: int) -> None:
        self.records.append(CommRecord(op, category, elements, ranks))

    def count(self, op: str, category: str | None = None) -> int:
        return sum(r.op == op and (category is None or r.category == category) for r in self.records)

    def volume(self, elem_bytes: int, category: str | None = None) -> int:
        """Bytes each rank sends under ring algorithms."""
        return sum(ring_volume(r.op, r.elements, r.ranks, elem_bytes)
                   for r in self.records if category is None or r.category == category)


def ring_volume(op: str, elements: int, ranks: int, elem_bytes: int) -> int:
    """Per-rank bytes sent by a ring collective on a tensor of ``elements`` total elements."""
    share = elements * elem_bytes * (ranks - 1) // ranks
    if op in ("all_gather", "reduce_scatter"):
        return share
    if op == "all_reduce":
        # reduce-scatter followed by all-gather
        return 2 * share
    raise ValueError(f"unknown collective {op!r}")


def _check(tensors: Sequence[np.ndarray]) -> None:
    if not tensors:
        raise CollectiveError("need at least one rank")
    first = tensors[0].shape
    for rank, x in enumerate(tensors[1:], start=1):
        if x.shape != first:
            raise CollectiveError(f"rank {rank} has shape {x.shape}, rank 0 has {first}")


def _ordered_sum(tensors: Sequence[np.ndarray]) -> np.ndarray:
    total = tensors[0].copy()
    for x in tensors[1:]:
        total = total + x
    return total


def all_gather(shards: Sequence[np.ndarray], axis: int = 0, log: CommLog | None = None,
               category: str = "activation") -> list[np.ndarray]:
    """Concatenate the shards along ``axis``; every rank gets the full tensor."""
    _check(shards)
    full = np.concatenate(shards, axis=axis)
    if log is not None:
        log.add("all_gather", category, full.size, len(shards))
    return [full.copy() for _ in shards]


def reduce_scatter(partials: Sequence[np.ndarray], axis: int = 0, log: CommLog | None = None,
                   category: str = "activation") -> list[np.ndarray]:
    """Sum the partials and give rank ``i`` the ``i``-th slice along ``axis``."""
    _check(partials)
    t = len(partials)
    if partials[0].shape[axis] % t:
        raise CollectiveError(f"axis size {partials[0].shape[axis]} not divisible by {t} ranks")
    total = _ordered_sum(partials)
    if log is not None:
        log.add("reduce_scatter", category, total.size, t)
    return [chunk.copy() for chunk in np.split(total, t, axis=axis)]


def all_reduce(partials: Sequence[np.ndarray], log: CommLog | None = None,
               category: str = "activation") -> list[np.ndarray]:
    """Sum the partials; every rank gets the total."""
    _check(partials)
    total = _ordered_sum(partials)
    if log is not None:
        log.add("all_reduce", category, total.size, len(partials))
    return [total.copy() for _ in partials]


@dataclass
class RankShardedTensor:
    """A logical tensor spread over simulated ranks.

    ``shard_axis`` is ``"sequence"`` (first dim), ``"hidden"`` (last dim) or
    ``"none"`` for a replicated tensor.
    """

    shards: list[np.ndarray]
    shard_axis: str = "none"

    def __post_init__(self) -> None:
        if self.shard_axis not in ("sequence", "hidden", "none"):
            raise CollectiveError(f"unknown shard axis {self.shard_axis!r}")
        _check(self.shards)
        if self.shard_axis == "none":
            for rank, x in enumerate(self.shards[1:], start=1):
                if not np.array_equal(x, self.shards[0]):
                    raise CollectiveError(f"replicated tensor differs on rank {rank}")

    @classmethod
    def shard(cls, full: np.ndarray, t: int, shard_axis: str) -> "RankShardedTensor":
        if shard_axis == "none":
            return cls([full.copy() for _ in range(t)], "none")
        axis = AXES[shard_axis]
        if full.shape[axis] % t:
            raise CollectiveError(f"cannot split size {full.shape[axis]} into {t} shards")
        return cls([c.copy() for c in np.split(full, t, axis=axis)], shard_axis)

    @property
    def ranks(self) -> int:
        return len(self.shards)

    @property
    def logical_shape(self) -> tuple[int, ...]:
        if self.shard_axis == "none":
            return self.shards[0].shape
        axis = AXES[self.shard_axis] % self.shards[0].ndim
        shape = list(self.shards[0].shape)
        shape[axis] *= self.ranks
        return tuple(shape)

    def full(self) -> np.ndarray:
        if self.shard_axis == "none":
            return self.shards[0].copy()
        return np.concatenate(self.shards, axis=AXES[self.shard_axis])
