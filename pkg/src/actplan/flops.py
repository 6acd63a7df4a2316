"""GEMM-only FLOP counts, MFU and HFU.

Counts are exact integers. ``batch`` everywhere is the number of sequences
processed in the iteration (microbatch size times microbatches times
data-parallel replicas).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Literal

from .config import Hardware, ModelShape, Recompute, RecomputeStrategy

SelectiveVariant = Literal["equation", "text"]


def layer_forward_flops(shape: ModelShape, batch: int) -> int:
    """One transformer layer forward: ``24Bsh² + 4Bs²h``."""
    s, h = shape.s, shape.h
    return 24 * batch * s * h * h + 4 * batch * s * s * h


def logits_forward_flops(shape: ModelShape, batch: int) -> int:
    return 2 * batch * shape.s * shape.h * shape.v


def model_flops(shape: ModelShape, batch: int) -> int:
    """Forward + backward FLOPs of one iteration (backward costs twice the forward)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return 3 * (shape.L * layer_forward_flops(shape, batch) + logits_forward_flops(shape, batch))


def selective_extra_flops(shape: ModelShape, batch: int, variant: SelectiveVariant = "equation") -> int:
    """FLOPs added by recomputing the attention core.

    ``"equation"`` gives ``12BLs²h``, the amount that makes the closed-form
    hardware-FLOPs expression and the 2.7%/1.6% overheads come out;
    ``"text"`` gives the ``4BLs²h`` of a single extra forward of the two
    attention GEMMs.
    """
    s, h, L = shape.s, shape.h, shape.L
    if variant == "equation":
        return 12 * batch * L * s * s * h
    if variant == "text":
        return 4 * batch * L * s * s * h
    raise ValueError(f"unknown selective FLOPs variant {variant!r}")


def full_extra_flops(shape: ModelShape, batch: int) -> int:
    """One extra forward of every transformer layer; the logits layer is not recomputed."""
    return shape.L * layer_forward_flops(shape, batch)


def recompute_extra_flops(shape: ModelShape, batch: int, mode: Recompute,
                          variant: SelectiveVariant = "equation") -> int:
    if mode is Recompute.NONE:
        return 0
    if mode is Recompute.SELECTIVE:
        return selective_extra_flops(shape, batch, variant)
    if mode is Recompute.FULL:
        return full_extra_flops(shape, batch)
    raise ValueError(f"unknown recompute mode {mode!r}")


def hardware_flops(shape: ModelShape, batch: int, strategy: RecomputeStrategy,
                   recompute_fraction: Fraction | None = None,
                   variant: SelectiveVariant = "equation") -> Fraction:
    """FLOPs actually executed, including recomputation.

    Microbatch-level strategies need ``recompute_fraction``: the share of
    (stage, microbatch) passes that were checkpointed, as produced by
    :func:`actplan.pipeline.microbatch_window_plan`. The result is then a
    rational; otherwise it is an integer.
    """
    if not isinstance(strategy, RecomputeStrategy):
        raise TypeError(f"unknown strategy {strategy!r}")
    base = model_flops(shape, batch)
    extra = recompute_extra_flops(shape, batch, strategy.mode, variant)
    if strategy.microbatch_level:
        if recompute_fraction is None:
            raise ValueError("microbatch-level strategy needs recompute_fraction")
        if not 0 <= recompute_fraction <= 1:
            raise ValueError("recompute_fraction must lie in [0, 1]")
        return base + Fraction(recompute_fraction) * extra
    return Fraction(base + extra)


def hw_model_ratio(shape: ModelShape, variant: SelectiveVariant = "equation") -> Fraction:
    """Exact hardware/model FLOPs ratio under selective recomputation (batch cancels)."""
    sel = RecomputeStrategy(Recompute.SELECTIVE)
    return hardware_flops(shape, 1, sel, variant=variant) / model_flops(shape, 1)


def approx_ratio(shape: ModelShape) -> Fraction:
    """Leading-order approximation ``1 + s/6h`` of :func:`hw_model_ratio`."""
    return 1 + Fraction(shape.s, 6 * shape.h)


def utilization(flops: int | Fraction, iteration_time: float, hw: Hardware) -> float:
    if not iteration_time > 0:
        raise ValueError("iteration_time must be > 0")
    return float(Fraction(flops) / (Fraction(iteration_time) * hw.devices * hw.peak_flops_per_device))


def mfu_hfu(shape: ModelShape, batch: int, strategy: RecomputeStrategy, iteration_time: float,
            hw: Hardware, recompute_fraction: Fraction | None = None,
            variant: SelectiveVariant = "equation") -> tuple[float, float]:
    """Model- and hardware-FLOPs utilization for a measured iteration time."""
    if not iteration_time > 0:
        raise ValueError("iteration_time must be > 0")
    model = model_flops(shape, batch)
    hardware = hardware_flops(shape, batch, strategy, recompute_fraction, variant)
    return utilization(model, iteration_time, hw), utilization(hardware, iteration_time, hw)


def predicted_speedup(shape: ModelShape, batch: int, slower: RecomputeStrategy,
                      faster: RecomputeStrategy, variant: SelectiveVariant = "equation") -> Fraction:
    """Throughput gain of ``faster`` over ``slower`` if time scales with hardware FLOPs."""
    return (hardware_flops(shape, batch, slower, variant=variant)
            / hardware_flops(shape, batch, faster, variant=variant)) - 1


@dataclass(frozen=True)
class FlopsReport:
    strategy: str
    batch: int
    model_flops_per_iter: int
    hardware_flops_per_iter: Fraction
    hw_model_ratio: Fraction
    approx_ratio: Fraction
    mfu: float | None = None
    hfu: float | None = None
    iteration_time: float | None = None
    baseline_iteration_time: float | None = None
    throughput_increase: float | None = None
    predicted_speedup_vs_full: float | None = None

    def to_dict(self) -> dict:
        hw = self.hardware_flops_per_iter
        return {
            "strategy": self.strategy,
            "batch": self.batch,
            "model_flops_per_iter": self.model_flops_per_iter,
            "hardware_flops_per_iter": int(hw) if hw.denominator == 1 else float(hw),
            "hw_model_ratio": float(self.hw_model_ratio),
            "approx_ratio": float(self.approx_ratio),
            "mfu": self.mfu,
            "hfu": self.hfu,
            "iteration_time": self.iteration_time,
            "baseline_iteration_time": self.baseline_iteration_time,
            "throughput_increase": self.throughput_increase,
            "predicted_speedup_vs_full": self.predicted_speedup_vs_full,
        }


def flops_report(shape: ModelShape, batch: int, strategy: RecomputeStrategy, hw: Hardware,
                 iteration_time: float | None = None, baseline_iteration_time: float | None = None,
                 recompute_fraction: Fraction | None = None,
                 variant: SelectiveVariant = "equation") -> FlopsReport:
    model = model_flops(shape, batch)
    hardware = hardware_flops(shape, batch, strategy, recompute_fraction, variant)
    mfu = hfu = increase = None
    if iteration_time is not None:
        mfu, hfu = utilization(model, iteration_time, hw), utilization(hardware, iteration_time, hw)
        if baseline_iteration_time is not None:
            increase = baseline_iteration_time / iteration_time - 1
    full = RecomputeStrategy(Recompute.FULL)
    speedup = float(hardware_flops(shape, batch, full, variant=variant) / hardware - 1)
    return FlopsReport(
        strategy=strategy.label,
        batch=batch,
        model_flops_per_iter=model,
        hardware_flops_per_iter=hardware,
        hw_model_ratio=hardware / model,
        approx_ratio=approx_ratio(shape),
        mfu=mfu,
        hfu=hfu,
        iteration_time=iteration_time,
        baseline_iteration_time=baseline_iteration_time,
        throughput_increase=increase,
        predicted_speedup_vs_full=speedup,
    )
