"""Activation-memory formulas checked against closed-form oracles written out here."""

from fractions import Fraction
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actplan.config import GIB, ByteConvention, ModelShape, ParallelLayout, RecomputeStrategy, preset
from actplan.memory import (
    dealloc_savings_bytes,
    extras_bytes,
    interleave_factor,
    layer_component_breakdown,
    local_parameter_count,
    memory_report,
    parameter_count,
    per_layer_bytes,
    percent_of_baseline,
    selective_savings_fraction,
    total_first_stage_bytes,
)

S = RecomputeStrategy.parse
SHAPE_22B = preset("22b").shape
TOY = ModelShape(a=2, h=8, L=4, s=4, v=16)


def oracle_per_layer(shape, b, t, strategy) -> Fraction:
    """Closed forms of the six per-layer regimes, in bytes."""
    sbh = shape.s * b * shape.h
    core = Fraction(5 * shape.a * shape.s, shape.h)
    if strategy.mode.value == "full":
        return Fraction(2 * sbh)
    if strategy.mode.value == "selective":
        return sbh * (Fraction(34, t) if strategy.sequence_parallel else 10 + Fraction(24, t))
    if strategy.sequence_parallel:
        return sbh * (34 + core) / t
    return sbh * (10 + Fraction(24, t) + core / t)


# --- frozen values ----------------------------------------------------------

def test_22b_no_parallelism():
    # sbh = 2048*4*6144, 5as/h = 320/3, so sbh * 422/3
    assert per_layer_bytes(SHAPE_22B, ParallelLayout(b=4), S("none")) == 7_079_985_152


def test_22b_sequence_parallel():
    assert per_layer_bytes(SHAPE_22B, ParallelLayout(t=8, b=4), S("none+seq")) == 884_998_144


def test_22b_sequence_parallel_selective():
    assert per_layer_bytes(SHAPE_22B, ParallelLayout(t=8, b=4), S("selective+seq")) == 213_909_504


@pytest.mark.parametrize("strategy", ["full", "full+seq", "full+mblevel"])
def test_full_recompute_keeps_layer_input(strategy):
    for shape, b in [(SHAPE_22B, 4), (TOY, 3)]:
        assert per_layer_bytes(shape, ParallelLayout(b=b), S(strategy)) == 2 * shape.s * b * shape.h


def test_toy_breakdown():
    parts = layer_component_breakdown(TOY, 1)
    assert (parts.attention, parts.mlp, parts.layer_norms) == (512, 608, 128)
    assert parts.total == 1248 == per_layer_bytes(TOY, ParallelLayout(), S("none"))


def test_five_as_over_h():
    for name, expected in [("175b", 80), ("530b", 64)]:
        shape = preset(name).shape
        assert Fraction(5 * shape.a * shape.s, shape.h) == expected


def test_selective_savings():
    assert selective_savings_fraction(preset("175b").shape) == Fraction(80, 114)
    assert selective_savings_fraction(preset("530b").shape) == Fraction(64, 98)


def test_interleave_factors():
    assert interleave_factor(preset("175b").layout) == Fraction(31, 24)
    assert interleave_factor(preset("530b").layout) == Fraction(139, 105)
    assert interleave_factor(preset("1t").layout) == 1


def test_530b_totals():
    cfg = preset("530b")
    sbh = 2048 * 20480
    assert per_layer_bytes(cfg.shape, cfg.layout, S("selective+seq")) == sbh * 34 // 8
    expected = math.floor(Fraction(sbh * 34, 8) * 105 * Fraction(139, 105))
    assert total_first_stage_bytes(cfg.shape, cfg.layout, S("selective+seq")) == expected


def test_percent_of_baseline_530b():
    cfg = preset("530b")
    assert percent_of_baseline(cfg.shape, cfg.layout, S("full")) == Fraction(2, 21)
    assert percent_of_baseline(cfg.shape, cfg.layout, S("none")) == 1
    assert percent_of_baseline(cfg.shape, cfg.layout, S("selective+seq")) == Fraction(34, 8 * 21)


def test_extras_small_against_transformer_total():
    for name in ("175b", "530b", "1t"):
        cfg = preset(name)
        ex = extras_bytes(cfg.shape, cfg.layout)
        total = total_first_stage_bytes(cfg.shape, cfg.layout, S("none+seq"))
        assert ex.logits == ex.final_layernorm == ex.output_proj_input == 0
        assert ex.total / total < 1e-2


def test_extras_without_pipeline():
    cfg = preset("22b")
    ex = extras_bytes(cfg.shape, cfg.layout)
    sbh = 2048 * 4 * 6144
    assert ex.embedding_dropout == sbh // 8
    assert ex.final_layernorm == ex.output_proj_input == 2 * sbh // 8
    assert ex.logits == 4 * 2048 * 4 * 51200 // 8


def test_dealloc_savings():
    cfg = preset("530b")
    assert dealloc_savings_bytes(cfg.shape, cfg.layout, 0) == 2_936_012_800
    assert round(2_936_012_800 / GIB, 2) == 2.73
    assert dealloc_savings_bytes(cfg.shape, cfg.layout, 35) == 0
    assert dealloc_savings_bytes(cfg.shape, cfg.layout, 34) == 2 * 2048 * 20480
    with pytest.raises(ValueError):
        dealloc_savings_bytes(cfg.shape, cfg.layout, -1)


def test_parameter_count_gpt3():
    # 12Lh² dominates; the published model has roughly 175 billion parameters
    assert abs(parameter_count(preset("175b").shape) / 1e9 - 175) < 1


def _shard_oracle(shape, layout):
    """Sum of each weight's shard on tensor rank 0, pipeline stage 0."""
    h, t, v, s = shape.h, layout.t, shape.v, shape.s
    col = lambda rows, cols: rows * cols // t  # noqa: E731
    per_layer = (
        col(h, 3 * h) + 3 * h // t       # QKV weight and bias, column split
        + col(h, h) + h                  # projection weight (row split), bias replicated
        + col(h, 4 * h) + 4 * h // t     # fc1, column split
        + col(4 * h, h) + h              # fc2 (row split), bias replicated
        + 4 * h                          # two layer norms
    )
    return per_layer * (shape.L // layout.p) + v * h // t + s * h


@pytest.mark.parametrize("name", ["22b", "175b", "530b", "1t"])
def test_local_parameter_count(name):
    cfg = preset(name)
    assert local_parameter_count(cfg.shape, cfg.layout) == _shard_oracle(cfg.shape, cfg.layout)


def test_report_invariants():
    cfg = preset("530b")
    rep = memory_report(cfg.shape, cfg.layout, S("selective+seq"))
    stage = math.floor(Fraction(rep.per_layer) * cfg.shape.L * rep.interleave_factor)
    assert rep.grand_total == stage + rep.extras.total + rep.params + rep.optimizer_state
    assert rep.optimizer_state == 7 * rep.params
    doc = rep.to_dict()
    assert doc["interleave_factor"] == "139/105"
    assert doc["footnotes"]


def test_optimizer_bytes_configurable():
    cfg = preset("175b")
    rep = memory_report(cfg.shape, cfg.layout, S("full"), ByteConvention(optimizer_bytes_per_param=12))
    assert rep.optimizer_state == 6 * rep.params


# --- properties -------------------------------------------------------------

@st.composite
def configs(draw):
    t = draw(st.sampled_from([1, 2, 4, 8]))
    head_dim = draw(st.integers(1, 16))
    a = t * draw(st.integers(1, 8))
    s = t * draw(st.integers(1, 64))
    b = draw(st.integers(1, 8))
    return ModelShape(a=a, h=a * head_dim, L=2, s=s, v=32), ParallelLayout(t=t, b=b)


STRATEGIES = ["none", "none+seq", "selective", "selective+seq", "full", "full+seq"]


@given(configs(), st.sampled_from(STRATEGIES))
@settings(max_examples=300, deadline=None)
def test_matches_closed_form(cfg, name):
    shape, layout = cfg
    strategy = S(name)
    assert per_layer_bytes(shape, layout, strategy) == math.floor(
        oracle_per_layer(shape, layout.b, layout.t, strategy))


@given(configs())
@settings(max_examples=200, deadline=None)
def test_regime_ordering(cfg):
    shape, layout = cfg
    m = {n: per_layer_bytes(shape, layout, S(n)) for n in STRATEGIES}
    assert m["none+seq"] <= m["none"]
    assert m["selective+seq"] <= m["selective"] <= m["none"]
    assert m["selective+seq"] <= m["none+seq"]
    if layout.t > 1:
        assert m["none+seq"] < m["none"]


@given(configs(), st.sampled_from(STRATEGIES))
@settings(max_examples=200, deadline=None)
def test_more_tensor_parallel_never_costs_more(cfg, name):
    shape, layout = cfg
    if layout.t == 1 or shape.a % 2 or shape.s % 2:
        return
    half = ParallelLayout(t=layout.t // 2, b=layout.b)
    assert per_layer_bytes(shape, layout, S(name)) <= per_layer_bytes(shape, half, S(name))


def test_breakdown_sums_on_random_shapes():
    import random
    rng = random.Random(7)
    for _ in range(1000):
        a = rng.randint(1, 16)
        shape = ModelShape(a=a, h=a * rng.randint(1, 32), L=1, s=rng.randint(1, 128), v=8)
        b = rng.randint(1, 4)
        parts = layer_component_breakdown(shape, b)
        sbh = shape.s * b * shape.h
        assert parts.total == per_layer_bytes(shape, ParallelLayout(b=b), S("none"))
        assert parts.mlp == 19 * sbh
        assert parts.layer_norms == 4 * sbh
        assert parts.attention == 11 * sbh + 5 * a * shape.s ** 2 * b
