"""1F1B pipeline schedule and per-rank activation-memory timelines.

Time is measured in logical ticks: every forward, recompute or backward of
one microbatch on one stage takes one tick and may start once its
predecessor on the same rank and its cross-stage dependency have finished.
Memory peaks depend only on the per-rank ordering, so no latency model is
needed.

Interleaved schedules are not simulated event by event; with ``m > 1`` the
transformer-layer bytes of every stored microbatch are scaled by the
interleaving factor instead.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .config import ByteConvention, ModelShape, ParallelLayout, RecomputeStrategy, require_valid
from .memory import (
    DEFAULT_BYTES,
    embedding_extra_per_microbatch,
    head_extras_per_microbatch,
    interleave_factor,
    per_layer_fraction,
)

TIMELINE_COLUMNS = ("rank", "step", "event", "microbatch", "stored_mode", "bytes_after_event")


class EventKind(str, enum.Enum):
    FORWARD = "forward"
    RECOMPUTE = "recompute"
    BACKWARD = "backward"


class StoredMode(str, enum.Enum):
    CHECKPOINTED = "checkpointed"
    FULLY_STORED = "fully_stored"


class ScheduleError(ValueError):
    pass


class InfeasibleBudgetError(ValueError):
    """The budget cannot hold even the all-checkpointed schedule."""

    def __init__(self, budget: int, minimum: int):
        self.budget = budget
        self.minimum = minimum
        super().__init__(f"budget {budget} bytes is below the minimum feasible {minimum} bytes")


@dataclass(frozen=True)
class ScheduleEvent:
    rank: int
    step: int
    kind: EventKind
    microbatch: int  # 1-based
    stored_mode: StoredMode = StoredMode.FULLY_STORED


def in_flight(p: int, stage: int) -> int:
    """Microbatches whose backward is outstanding at the 1F1B peak on ``stage`` (0-based)."""
    if stage < 0:
        raise ValueError("stage must be >= 0")
    return max(0, p - stage)


def rank_order(p: int, n_mb: int, rank: int) -> list[tuple[EventKind, int]]:
    """The 1F1B sequence of (kind, microbatch) for one stage."""
    warmup = min(p - rank - 1, n_mb)
    order = [(EventKind.FORWARD, mb) for mb in range(1, warmup + 1)]
    next_fwd, next_bwd = warmup + 1, 1
    while next_fwd <= n_mb:
        order.append((EventKind.FORWARD, next_fwd))
        order.append((EventKind.BACKWARD, next_bwd))
        next_fwd += 1
        next_bwd += 1
    order.extend((EventKind.BACKWARD, mb) for mb in range(next_bwd, n_mb + 1))
    return order


def _assign_steps(p: int, orders: list[list[tuple[EventKind, int, StoredMode]]]) -> list[ScheduleEvent]:
    """Give every event the earliest tick allowed by rank order and stage dependencies."""
    finish: dict[tuple[int, EventKind, int], int] = {}
    cursor = [0] * p
    clock = [0] * p
    events: list[ScheduleEvent] = []
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for rank in range(p):
            while cursor[rank] < len(orders[rank]):
                kind, mb, mode = orders[rank][cursor[rank]]
                if kind is EventKind.FORWARD:
                    dep = (rank - 1, EventKind.FORWARD, mb) if rank > 0 else None
                elif kind is EventKind.BACKWARD and rank < p - 1:
                    dep = (rank + 1, EventKind.BACKWARD, mb)
                else:
                    dep = None
                if dep is not None and dep not in finish:
                    break
                start = max(clock[rank], finish[dep] if dep is not None else 0)
                finish[(rank, kind, mb)] = start + 1
                clock[rank] = start + 1
                events.append(ScheduleEvent(rank, start, kind, mb, mode))
                cursor[rank] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ScheduleError("schedule deadlocked")
    events.sort(key=lambda e: (e.step, e.rank))
    return events


def build_1f1b(p: int, n_mb: int,
               modes: dict[int, dict[int, StoredMode]] | None = None) -> list[ScheduleEvent]:
    """Build the 1F1B schedule, optionally with per-(rank, microbatch) storage modes.

    A checkpointed microbatch gets a recompute event right before its backward.
    """
    if p < 1:
        raise ScheduleError("p must be >= 1")
    if n_mb < p:
        raise ScheduleError("pipeline cannot be filled (n_mb < p)")
    orders = []
    for rank in range(p):
        rank_modes = (modes or {}).get(rank, {})
        seq = []
        for kind, mb in rank_order(p, n_mb, rank):
            mode = rank_modes.get(mb, StoredMode.FULLY_STORED)
            if kind is EventKind.BACKWARD and mode is StoredMode.CHECKPOINTED:
                seq.append((EventKind.RECOMPUTE, mb, mode))
            seq.append((kind, mb, mode))
        orders.append(seq)
    return _assign_steps(p, orders)


@dataclass(frozen=True)
class TimelineEntry:
    rank: int
    step: int
    event: EventKind
    microbatch: int
    stored_mode: StoredMode
    bytes_after_event: int


@dataclass(frozen=True)
class MemoryTimeline:
    p: int
    entries: tuple[TimelineEntry, ...]
    peak_per_rank: tuple[int, ...]
    dealloc: bool

    def for_rank(self, rank: int) -> list[TimelineEntry]:
        return [e for e in self.entries if e.rank == rank]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TIMELINE_COLUMNS)
        for e in self.entries:
            writer.writerow((e.rank, e.step, e.event.value, e.microbatch, e.stored_mode.value,
                             e.bytes_after_event))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "dealloc": self.dealloc,
            "peak_per_rank": list(self.peak_per_rank),
            "entries": [
                {"rank": e.rank, "step": e.step, "event": e.event.value, "microbatch": e.microbatch,
                 "stored_mode": e.stored_mode.value, "bytes_after_event": e.bytes_after_event}
                for e in self.entries
            ],
        }

    def box_chart(self) -> dict:
        """Plot-ready boxes, one per event: rank, start tick, width 1, colour class."""
        colour = {
            (EventKind.FORWARD, StoredMode.CHECKPOINTED): "forward_checkpointed",
            (EventKind.FORWARD, StoredMode.FULLY_STORED): "forward_stored",
            (EventKind.RECOMPUTE, StoredMode.CHECKPOINTED): "recompute",
            (EventKind.BACKWARD, StoredMode.CHECKPOINTED): "backward",
            (EventKind.BACKWARD, StoredMode.FULLY_STORED): "backward",
        }
        return {
            "p": self.p,
            "boxes": [
                {"rank": e.rank, "start": e.step, "width": 1, "microbatch": e.microbatch,
                 "class": colour[(e.event, e.stored_mode)]}
                for e in self.entries
            ],
        }


@dataclass(frozen=True)
class _StageCosts:
    """Per-microbatch byte costs on one rank, exact."""

    stored: Fraction
    checkpointed: Fraction
    embedding: Fraction
    head: tuple[Fraction, ...]
    output_tensor: Fraction


def _stage_costs(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                 rank: int, dealloc: bool, conv: ByteConvention) -> _StageCosts:
    layers = Fraction(shape.L, layout.p) * interleave_factor(layout)
    stored = per_layer_fraction(shape, layout, strategy.fully_stored, conv) * layers
    checkpointed = per_layer_fraction(shape, layout, strategy.inner, conv) * layers
    if not strategy.microbatch_level:
        stored = checkpointed
    embedding = embedding_extra_per_microbatch(shape, layout, conv) if rank == 0 else Fraction(0)
    head = head_extras_per_microbatch(shape, layout, conv) if layout.p == 1 else ()
    output = Fraction(0) if dealloc else Fraction(conv.activation_elem * shape.s * layout.b * shape.h)
    return _StageCosts(stored, checkpointed, embedding, head, output)


def _bytes(costs: _StageCosts, n_stored: int, n_ckpt: int) -> int:
    n = n_stored + n_ckpt
    total = math.floor(costs.stored * n_stored + costs.checkpointed * n_ckpt)
    total += math.floor(costs.embedding * n)
    total += sum(math.floor(x * n) for x in costs.head)
    total += math.floor(costs.output_tensor * n)
    return total


def _exact_bytes(costs: _StageCosts, n_stored: int, n_ckpt: int) -> Fraction:
    per_mb = costs.embedding + sum(costs.head, Fraction(0)) + costs.output_tensor
    return costs.stored * n_stored + costs.checkpointed * n_ckpt + per_mb * (n_stored + n_ckpt)


def _timeline(shape, layout, strategy, dealloc, conv, events, ranks=None) -> MemoryTimeline:
    p = layout.p
    ranks = range(p) if ranks is None else ranks
    costs = {r: _stage_costs(shape, layout, strategy, r, dealloc, conv) for r in ranks}
    counts = {r: [0, 0] for r in ranks}
    peaks = {r: 0 for r in ranks}
    memo: dict[tuple[int, int, int], int] = {}
    entries = []
    for ev in events:
        if ev.rank not in costs:
            continue
        c = counts[ev.rank]
        slot = 0 if ev.stored_mode is StoredMode.FULLY_STORED else 1
        if ev.kind is EventKind.FORWARD:
            c[slot] += 1
        elif ev.kind is EventKind.BACKWARD:
            c[slot] -= 1
        if c[slot] < 0:
            raise ScheduleError(f"backward before forward on rank {ev.rank}")
        key = (ev.rank, c[0], c[1])
        if key not in memo:
            memo[key] = _bytes(costs[ev.rank], c[0], c[1])
        now = memo[key]
        peaks[ev.rank] = max(peaks[ev.rank], now)
        entries.append(TimelineEntry(ev.rank, ev.step, ev.kind, ev.microbatch, ev.stored_mode, now))
    return MemoryTimeline(p, tuple(entries), tuple(peaks[r] for r in ranks), dealloc)


def simulate_memory(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                    dealloc: bool = True, conv: ByteConvention = DEFAULT_BYTES,
                    ranks: list[int] | None = None) -> MemoryTimeline:
    """Activation bytes on every rank after every event of the 1F1B schedule.

    Non-windowed strategies store every microbatch in the strategy's own
    regime. For a microbatch-level strategy every microbatch is checkpointed
    here; use :func:`microbatch_window_plan` to get the windowed timeline.
    ``ranks`` limits the returned timeline to a subset of stages.
    """
    require_valid(shape, layout)
    modes = None
    if strategy.microbatch_level:
        modes = {r: {mb: StoredMode.CHECKPOINTED for mb in range(1, layout.n_mb + 1)}
                 for r in range(layout.p)}
    events = build_1f1b(layout.p, layout.n_mb, modes)
    return _timeline(shape, layout, strategy, dealloc, conv, events, ranks)


@dataclass(frozen=True)
class WindowPlan:
    budget: int
    per_stage: tuple[tuple[int, int], ...]  # (fully_stored, checkpointed) per rank
    modes: dict[int, dict[int, StoredMode]] = field(repr=False)
    timeline: MemoryTimeline = field(repr=False)

    @property
    def recompute_counts(self) -> list[int]:
        return [ckpt for _, ckpt in self.per_stage]

    @property
    def recompute_fraction(self) -> Fraction:
        """Checkpointed (stage, microbatch) passes over all passes."""
        total = sum(stored + ckpt for stored, ckpt in self.per_stage)
        return Fraction(sum(self.recompute_counts), total)

    def fully_stored(self, rank: int) -> list[int]:
        return sorted(mb for mb, mode in self.modes[rank].items() if mode is StoredMode.FULLY_STORED)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "per_stage": [{"stage": r, "fully_stored": a, "checkpointed": b}
                          for r, (a, b) in enumerate(self.per_stage)],
            "recompute_fraction": float(self.recompute_fraction),
            "peak_per_rank": list(self.timeline.peak_per_rank),
        }


def min_window_budget(shape: ModelShape, layout: ParallelLayout, inner: RecomputeStrategy,
                      dealloc: bool = True, conv: ByteConvention = DEFAULT_BYTES) -> int:
    """Largest per-rank peak when every microbatch is checkpointed."""
    strategy = RecomputeStrategy(inner.mode, inner.sequence_parallel, microbatch_level=True)
    return max(simulate_memory(shape, layout, strategy, dealloc, conv).peak_per_rank)


def microbatch_window_plan(shape: ModelShape, layout: ParallelLayout, inner: RecomputeStrategy,
                           budget: int, dealloc: bool = True,
                           conv: ByteConvention = DEFAULT_BYTES) -> WindowPlan:
    """Fully store as many in-flight microbatches per rank as ``budget`` allows.

    Walking each rank's 1F1B order, a forward is fully stored when the
    projected peak (current bytes, this microbatch fully stored, and every
    further forward before the next backward checkpointed) fits the budget.
    Backwards free memory before the next forward is admitted.
    """
    require_valid(shape, layout)
    strategy = RecomputeStrategy(inner.mode, inner.sequence_parallel, microbatch_level=True)
    minimum = min_window_budget(shape, layout, inner, dealloc, conv)
    if budget < minimum:
        raise InfeasibleBudgetError(budget, minimum)

    p, n_mb = layout.p, layout.n_mb
    modes: dict[int, dict[int, StoredMode]] = {}
    for rank in range(p):
        costs = _stage_costs(shape, layout, strategy, rank, dealloc, conv)
        order = rank_order(p, n_mb, rank)
        rank_modes: dict[int, StoredMode] = {}
        # forwards between each event and the next backward on this rank
        ahead = [0] * len(order)
        run = 0
        for i in range(len(order) - 1, -1, -1):
            ahead[i] = run
            run = 0 if order[i][0] is EventKind.BACKWARD else run + 1
        n_stored = n_ckpt = 0
        for i, (kind, mb) in enumerate(order):
            if kind is EventKind.BACKWARD:
                if rank_modes[mb] is StoredMode.FULLY_STORED:
                    n_stored -= 1
                else:
                    n_ckpt -= 1
                continue
            projected = _exact_bytes(costs, n_stored + 1, n_ckpt + ahead[i])
            if projected <= budget:
                rank_modes[mb] = StoredMode.FULLY_STORED
                n_stored += 1
            else:
                rank_modes[mb] = StoredMode.CHECKPOINTED
                n_ckpt += 1
        modes[rank] = rank_modes

    events = build_1f1b(p, n_mb, modes)
    timeline = _timeline(shape, layout, strategy, dealloc, conv, events)
    if max(timeline.peak_per_rank) > budget:
        raise ScheduleError("window plan exceeded its budget")  # should be unreachable
    per_stage = tuple(
        (sum(m is StoredMode.FULLY_STORED for m in modes[r].values()),
         sum(m is StoredMode.CHECKPOINTED for m in modes[r].values()))
        for r in range(p)
    )
    return WindowPlan(budget, per_stage, modes, timeline)
