"""Activation memory and FLOPs planning for parallel transformer training."""

from .config import (
    ALL_STRATEGIES,
    GIB,
    ByteConvention,
    Config,
    ConfigError,
    Hardware,
    ModelShape,
    ParallelLayout,
    PRESETS,
    Recompute,
    RecomputeStrategy,
    ValidationError,
    load_config,
    parse_config,
    preset,
    serialize_config,
    validate,
)
from .flops import flops_report, hardware_flops, mfu_hfu, model_flops
from .memory import (
    dealloc_savings_bytes,
    extras_bytes,
    layer_component_breakdown,
    memory_report,
    per_layer_bytes,
    total_first_stage_bytes,
)
from .pipeline import build_1f1b, in_flight, microbatch_window_plan, simulate_memory
from .planner import SearchSpace, enumerate_plans

__version__ = "0.1.0"

__all__ = [
    "ALL_STRATEGIES", "GIB", "PRESETS", "ByteConvention", "Config", "ConfigError", "Hardware",
    "ModelShape", "ParallelLayout", "Recompute", "RecomputeStrategy", "SearchSpace",
    "ValidationError", "build_1f1b", "dealloc_savings_bytes", "enumerate_plans", "extras_bytes",
    "flops_report", "hardware_flops", "in_flight", "layer_component_breakdown", "load_config",
    "memory_report", "mfu_hfu", "microbatch_window_plan", "model_flops", "parse_config",
    "per_layer_bytes", "preset", "serialize_config", "simulate_memory", "total_first_stage_bytes",
    "validate",
]
