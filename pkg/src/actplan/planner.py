"""Search parallel layouts and recompute strategies against a device-memory budget.

Hardware FLOPs stand in for iteration time: there is no latency model, so a
plan with fewer executed FLOPs is assumed faster.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .config import (
    ALL_STRATEGIES,
    ByteConvention,
    Hardware,
    ModelShape,
    ParallelLayout,
    RecomputeStrategy,
    validate,
)
from .flops import hardware_flops
from .memory import DEFAULT_BYTES, params_and_optimizer_bytes
from .pipeline import InfeasibleBudgetError, microbatch_window_plan, simulate_memory


@dataclass(frozen=True)
class SearchSpace:
    """Candidate sizes to try. ``batch`` is sequences per iteration across all replicas."""

    t: Sequence[int]
    p: Sequence[int]
    m: Sequence[int] = (1,)
    b: Sequence[int] = (1,)
    strategies: Sequence[RecomputeStrategy] = ALL_STRATEGIES
    batch: int = 1

    @classmethod
    def around(cls, layout: ParallelLayout, strategies: Sequence[RecomputeStrategy] = ALL_STRATEGIES,
               **overrides) -> "SearchSpace":
        """A space pinned to ``layout`` unless a dimension is overridden."""
        base = dict(t=(layout.t,), p=(layout.p,), m=(layout.m,), b=(layout.b,),
                    strategies=tuple(strategies), batch=layout.batch_per_iteration)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass(frozen=True)
class PlanCandidate:
    layout: ParallelLayout
    strategy: RecomputeStrategy
    peak_bytes: int
    params_bytes: int
    optimizer_bytes: int
    hardware_flops: Fraction
    feasible: bool
    headroom: int
    recompute_fraction: Fraction | None = None

    @property
    def total_bytes(self) -> int:
        return self.peak_bytes + self.params_bytes + self.optimizer_bytes

    def sort_key(self):
        lay = self.layout
        return (not self.feasible, self.hardware_flops, -self.headroom, lay.t,
                lay.p, lay.m, lay.b, self.strategy.label)

    def to_dict(self) -> dict:
        lay = self.layout
        hw = self.hardware_flops
        return {
            "t": lay.t, "p": lay.p, "m": lay.m, "d": lay.d, "b": lay.b, "n_mb": lay.n_mb,
            "strategy": self.strategy.label,
            "peak_bytes": self.peak_bytes,
            "params_bytes": self.params_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "total_bytes": self.total_bytes,
            "hardware_flops": int(hw) if hw.denominator == 1 else float(hw),
            "feasible": self.feasible,
            "headroom": self.headroom,
            "recompute_fraction": None if self.recompute_fraction is None else float(self.recompute_fraction),
        }


@dataclass(frozen=True)
class PlanResult:
    candidates: tuple[PlanCandidate, ...]
    skipped: tuple[str, ...] = field(default=(), repr=False)

    @property
    def feasible(self) -> list[PlanCandidate]:
        return [c for c in self.candidates if c.feasible]

    @property
    def best(self) -> PlanCandidate | None:
        return self.feasible[0] if self.feasible else None

    @property
    def min_shortfall(self) -> int:
        """Bytes missing for the closest candidate to fit; 0 if any fits."""
        if self.feasible or not self.candidates:
            return 0
        return min(-c.headroom for c in self.candidates)


def layouts(space: SearchSpace, shape: ModelShape, hw: Hardware) -> Iterable[tuple[ParallelLayout, list[str]]]:
    """All layouts of the space, each with its violations (empty when usable).

    ``d`` is fixed by the device count; ``n_mb`` by the iteration batch.
    """
    for t in space.t:
        for p in space.p:
            for m in space.m:
                for b in space.b:
                    problems = []
                    if hw.devices % (t * p):
                        problems.append(f"devices not divisible by t·p={t * p}")
                        d = 1
                    else:
                        d = hw.devices // (t * p)
                    if space.batch % (b * d):
                        problems.append(f"batch {space.batch} not divisible by b·d={b * d}")
                        n_mb = p
                    else:
                        n_mb = space.batch // (b * d)
                    layout = ParallelLayout(t=t, p=p, m=m, d=d, b=b, n_mb=max(n_mb, 1))
                    yield layout, problems + validate(shape, layout)


def evaluate(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy, hw: Hardware,
             conv: ByteConvention = DEFAULT_BYTES, dealloc: bool = True) -> PlanCandidate:
    params, optimizer = params_and_optimizer_bytes(shape, layout, conv)
    budget = hw.device_mem - params - optimizer
    batch = layout.batch_per_iteration
    fraction = None
    if strategy.microbatch_level:
        try:
            plan = microbatch_window_plan(shape, layout, strategy.inner, budget, dealloc, conv)
        except InfeasibleBudgetError as exc:
            peak = exc.minimum
            fraction = Fraction(1)
        else:
            peak = plan.timeline.peak_per_rank[0]
            fraction = plan.recompute_fraction
        flops = hardware_flops(shape, batch, strategy, recompute_fraction=fraction)
    else:
        peak = simulate_memory(shape, layout, strategy, dealloc, conv, ranks=[0]).peak_per_rank[0]
        flops = hardware_flops(shape, batch, strategy)
    headroom = hw.device_mem - (peak + params + optimizer)
    return PlanCandidate(layout, strategy, peak, params, optimizer, flops, headroom >= 0, headroom, fraction)


def enumerate_plans(shape: ModelShape, hw: Hardware, space: SearchSpace,
                    conv: ByteConvention = DEFAULT_BYTES, dealloc: bool = True) -> PlanResult:
    """Evaluate every valid (layout, strategy) pair and rank them.

    Feasible plans come first, then ascending hardware FLOPs, descending
    headroom and ascending ``t``; remaining fields break ties so the order
    is total.
    """
    if not space.strategies or not space.t or not space.p or not space.m or not space.b:
        raise ValueError("search space is empty")
    out, skipped = [], []
    for layout, problems in layouts(space, shape, hw):
        if problems:
            skipped.append(f"t={layout.t} p={layout.p} m={layout.m} b={layout.b}: {'; '.join(problems)}")
            continue
        for strategy in space.strategies:
            out.append(evaluate(shape, layout, strategy, hw, conv, dealloc))
    out.sort(key=PlanCandidate.sort_key)
    return PlanResult(tuple(out), tuple(skipped))


__all__ = [
    "PlanCandidate",
    "PlanResult",
    "SearchSpace",
    "enumerate_plans",
    "evaluate",
]
