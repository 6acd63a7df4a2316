"""Activation, parameter and optimizer memory per device.

Every stored activation of a transformer layer is listed in
:data:`LAYER_ACTIVATIONS` as a multiple of ``sbh`` or ``a·s²·b`` elements.
Byte totals for each recompute/parallel regime are derived from that table,
so changing :class:`~actplan.config.ByteConvention` rescales everything
consistently. Arithmetic is done in :class:`fractions.Fraction` and floored
only when an integer byte count is reported.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import NamedTuple

from .config import (
    GIB,
    ByteConvention,
    ModelShape,
    ParallelLayout,
    Recompute,
    RecomputeStrategy,
    require_valid,
)

DEFAULT_BYTES = ByteConvention()

BASELINE = RecomputeStrategy(Recompute.NONE, sequence_parallel=False)

FOOTNOTES = (
    "Transient memory for the backward all-gather of the sequence-sharded "
    "layer-norm output is not counted.",
    "Small buffers (layer-norm mean/variance, workspaces) are ignored.",
)


class StoredActivation(NamedTuple):
    name: str
    block: str  # attention | mlp | layer_norms
    base: str  # "sbh" or "as2b"
    count: int  # multiple of the base element count
    kind: str  # "activation" or "mask"
    tensor_sharded: bool  # split across the tensor-parallel group without sequence parallelism
    attention_core: bool  # discarded and recomputed under selective recomputation


LAYER_ACTIVATIONS: tuple[StoredActivation, ...] = (
    StoredActivation("ln1_input", "layer_norms", "sbh", 1, "activation", False, False),
    StoredActivation("qkv_input", "attention", "sbh", 1, "activation", False, False),
    StoredActivation("query", "attention", "sbh", 1, "activation", True, False),
    StoredActivation("key", "attention", "sbh", 1, "activation", True, False),
    StoredActivation("softmax_output", "attention", "as2b", 1, "activation", True, True),
    StoredActivation("softmax_dropout_mask", "attention", "as2b", 1, "mask", True, True),
    StoredActivation("softmax_dropout_output", "attention", "as2b", 1, "activation", True, True),
    StoredActivation("value", "attention", "sbh", 1, "activation", True, False),
    StoredActivation("proj_input", "attention", "sbh", 1, "activation", True, False),
    StoredActivation("attn_dropout_mask", "attention", "sbh", 1, "mask", False, False),
    StoredActivation("ln2_input", "layer_norms", "sbh", 1, "activation", False, False),
    StoredActivation("fc1_input", "mlp", "sbh", 1, "activation", False, False),
    StoredActivation("gelu_input", "mlp", "sbh", 4, "activation", True, False),
    StoredActivation("fc2_input", "mlp", "sbh", 4, "activation", True, False),
    StoredActivation("mlp_dropout_mask", "mlp", "sbh", 1, "mask", False, False),
)


def _elem_bytes(kind: str, conv: ByteConvention) -> int:
    return conv.activation_elem if kind == "activation" else conv.mask_elem


def _entry_bytes(entry: StoredActivation, shape: ModelShape, b: int, t: int,
                 sequence_parallel: bool, conv: ByteConvention) -> Fraction:
    s, h, a = shape.s, shape.h, shape.a
    elems = s * b * h if entry.base == "sbh" else a * s * s * b
    out = Fraction(entry.count * elems * _elem_bytes(entry.kind, conv))
    if sequence_parallel or entry.tensor_sharded:
        out /= t
    return out


def per_layer_fraction(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                       conv: ByteConvention = DEFAULT_BYTES) -> Fraction:
    """Exact per-layer activation bytes for the checkpointed regime of ``strategy``.

    Microbatch-level strategies report their inner (checkpointed) regime,
    i.e. the minimum per-layer footprint.
    """
    s, b, h, t = shape.s, layout.b, shape.h, layout.t
    if strategy.mode is Recompute.FULL:
        # only the layer input is kept; the 1/t variant needs an extra all-gather and is not modeled
        return Fraction(conv.activation_elem * s * b * h)
    total = Fraction(0)
    for entry in LAYER_ACTIVATIONS:
        if strategy.mode is Recompute.SELECTIVE and entry.attention_core:
            continue
        total += _entry_bytes(entry, shape, b, t, strategy.sequence_parallel, conv)
    return total


def per_layer_bytes(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                    conv: ByteConvention = DEFAULT_BYTES) -> int:
    require_valid(shape, layout)
    return math.floor(per_layer_fraction(shape, layout, strategy, conv))


@dataclass(frozen=True)
class LayerMemoryBreakdown:
    attention: int
    mlp: int
    layer_norms: int

    @property
    def total(self) -> int:
        return self.attention + self.mlp + self.layer_norms


def layer_component_breakdown(shape: ModelShape, b: int,
                              conv: ByteConvention = DEFAULT_BYTES) -> LayerMemoryBreakdown:
    """Per-block activation bytes of one unparallelized layer."""
    require_valid(shape, ParallelLayout(b=b))
    blocks = {"attention": Fraction(0), "mlp": Fraction(0), "layer_norms": Fraction(0)}
    for entry in LAYER_ACTIVATIONS:
        blocks[entry.block] += _entry_bytes(entry, shape, b, 1, False, conv)
    return LayerMemoryBreakdown(**{k: int(v) for k, v in blocks.items()})


def interleave_factor(layout: ParallelLayout) -> Fraction:
    """Layers-worth of activations held by stage 0, relative to ``L``."""
    if layout.m == 1:
        return Fraction(1)
    return 1 + Fraction(layout.p - 1, layout.p * layout.m)


def total_first_stage_fraction(shape: ModelShape, layout: ParallelLayout,
                               strategy: RecomputeStrategy,
                               conv: ByteConvention = DEFAULT_BYTES) -> Fraction:
    return per_layer_fraction(shape, layout, strategy, conv) * shape.L * interleave_factor(layout)


def total_first_stage_bytes(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                            conv: ByteConvention = DEFAULT_BYTES) -> int:
    """Transformer-layer activation bytes on the first pipeline stage."""
    require_valid(shape, layout)
    return math.floor(total_first_stage_fraction(shape, layout, strategy, conv))


@dataclass(frozen=True)
class Extras:
    embedding_dropout: int
    final_layernorm: int
    output_proj_input: int
    logits: int

    @property
    def total(self) -> int:
        return self.embedding_dropout + self.final_layernorm + self.output_proj_input + self.logits


def embedding_extra_per_microbatch(shape: ModelShape, layout: ParallelLayout,
                                   conv: ByteConvention = DEFAULT_BYTES) -> Fraction:
    """Embedding-dropout mask of one microbatch, sequence-sharded."""
    return Fraction(conv.mask_elem * shape.s * layout.b * shape.h, layout.t)


def head_extras_per_microbatch(shape: ModelShape, layout: ParallelLayout,
                               conv: ByteConvention = DEFAULT_BYTES) -> tuple[Fraction, Fraction, Fraction]:
    """Final layer-norm input, output-projection input and fp32 logits of one microbatch."""
    sbh = shape.s * layout.b * shape.h
    t = layout.t
    return (
        Fraction(conv.activation_elem * sbh, t),
        Fraction(conv.activation_elem * sbh, t),
        Fraction(conv.logits_elem * shape.s * layout.b * shape.v, t),
    )


def extras_bytes(shape: ModelShape, layout: ParallelLayout,
                 conv: ByteConvention = DEFAULT_BYTES) -> Extras:
    """Activations outside the transformer layers held by the first stage.

    The output-layer terms only land on the first stage when there is no
    pipeline parallelism.
    """
    require_valid(shape, layout)
    embedding = math.floor(embedding_extra_per_microbatch(shape, layout, conv) * layout.p)
    if layout.p > 1:
        return Extras(embedding, 0, 0, 0)
    ln, proj, logits = (math.floor(x) for x in head_extras_per_microbatch(shape, layout, conv))
    return Extras(embedding, ln, proj, logits)


def dealloc_savings_bytes(shape: ModelShape, layout: ParallelLayout, stage: int,
                          conv: ByteConvention = DEFAULT_BYTES) -> int:
    """Bytes freed on ``stage`` by dropping each in-flight microbatch's output tensor."""
    if stage < 0:
        raise ValueError("stage must be >= 0")
    in_flight = max(0, layout.p - stage)
    return conv.activation_elem * shape.s * layout.b * shape.h * in_flight


def parameter_count(shape: ModelShape) -> int:
    """Total parameters: ``12Lh² + 13Lh`` in the layers plus word and position embeddings."""
    L, h = shape.L, shape.h
    return 12 * L * h * h + 13 * L * h + (shape.v + shape.s) * h


def local_parameter_count(shape: ModelShape, layout: ParallelLayout) -> int:
    """Parameters resident on tensor rank 0 of pipeline stage 0.

    Per layer, the QKV/projection/MLP weights and the column-parallel biases
    (``12h² + 7h``) are split across ``t``; the row-parallel biases and the
    layer-norm gains/biases (``6h``) are replicated. The word embedding is
    vocab-sharded, the position embedding replicated.
    """
    h, t = shape.h, layout.t
    layers = shape.L // layout.p
    sharded = layers * (12 * h * h + 7 * h) + shape.v * h
    replicated = layers * 6 * h + shape.s * h
    return sharded // t + replicated


def params_and_optimizer_bytes(shape: ModelShape, layout: ParallelLayout,
                               conv: ByteConvention = DEFAULT_BYTES) -> tuple[int, int]:
    require_valid(shape, layout)
    n = local_parameter_count(shape, layout)
    return conv.weight_elem * n, conv.optimizer_bytes_per_param * n


def percent_of_baseline(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                        conv: ByteConvention = DEFAULT_BYTES) -> Fraction:
    """Per-layer memory as a fraction of plain tensor parallelism (no recompute, no sequence sharding)."""
    require_valid(shape, layout)
    return (per_layer_fraction(shape, layout, strategy, conv)
            / per_layer_fraction(shape, layout, BASELINE, conv))


def selective_savings_fraction(shape: ModelShape) -> Fraction:
    """Share of per-layer activations removed by selective recomputation (``1 - 34/(34 + 5as/h)``)."""
    core = Fraction(5 * shape.a * shape.s, shape.h)
    return 1 - Fraction(34) / (34 + core)


def attention_core_coefficient(shape: ModelShape) -> Fraction:
    """The ``5as/h`` term of the per-layer activation coefficient."""
    return Fraction(5 * shape.a * shape.s, shape.h)


@dataclass(frozen=True)
class MemoryReport:
    strategy: str
    per_layer: int
    transformer_total_first_stage: int
    extras: Extras
    interleave_factor: Fraction
    params: int
    optimizer_state: int
    grand_total: int
    percent_of_baseline: Fraction
    footnotes: tuple[str, ...] = field(default=FOOTNOTES)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["extras"] = asdict(self.extras)
        out["interleave_factor"] = str(self.interleave_factor)
        out["interleave_factor_value"] = float(self.interleave_factor)
        out["percent_of_baseline"] = float(self.percent_of_baseline) * 100
        out["grand_total_gib"] = self.grand_total / GIB
        out["footnotes"] = list(self.footnotes)
        return out


def memory_report(shape: ModelShape, layout: ParallelLayout, strategy: RecomputeStrategy,
                  conv: ByteConvention = DEFAULT_BYTES) -> MemoryReport:
    require_valid(shape, layout)
    per_layer = per_layer_fraction(shape, layout, strategy, conv)
    factor = interleave_factor(layout)
    extras = extras_bytes(shape, layout, conv)
    params, optimizer = params_and_optimizer_bytes(shape, layout, conv)
    transformer = math.floor(per_layer * shape.L * factor)
    return MemoryReport(
        strategy=strategy.label,
        per_layer=math.floor(per_layer),
        transformer_total_first_stage=math.floor(per_layer * shape.L),
        extras=extras,
        interleave_factor=factor,
        params=params,
        optimizer_state=optimizer,
        grand_total=transformer + extras.total + params + optimizer,
        percent_of_baseline=percent_of_baseline(shape, layout, strategy, conv),
    )
