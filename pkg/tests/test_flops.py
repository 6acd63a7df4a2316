from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actplan.config import Hardware, ModelShape, RecomputeStrategy, preset
from actplan.flops import (
    approx_ratio,
    flops_report,
    hardware_flops,
    hw_model_ratio,
    mfu_hfu,
    model_flops,
    predicted_speedup,
)

S = RecomputeStrategy.parse


def factored_model(shape, B):
    """72BLsh²(1 + s/6h + v/12hL), evaluated with rationals."""
    L, s, h, v = shape.L, shape.s, shape.h, shape.v
    return 72 * B * L * s * h * h * (1 + Fraction(s, 6 * h) + Fraction(v, 12 * h * L))


def factored_selective(shape, B):
    """72BLsh²(1 + s/3h + v/12hL)."""
    L, s, h, v = shape.L, shape.s, shape.h, shape.v
    return 72 * B * L * s * h * h * (1 + Fraction(s, 3 * h) + Fraction(v, 12 * h * L))


def test_175b_model_flops():
    value = model_flops(preset("175b").shape, 64)
    assert isinstance(value, int)
    assert abs(value - 1.4113e17) <= 0.01e17
    assert value == factored_model(preset("175b").shape, 64)


@pytest.mark.parametrize("name", ["22b", "175b", "530b", "1t"])
def test_factored_forms(name):
    shape = preset(name).shape
    assert model_flops(shape, 7) == factored_model(shape, 7)
    assert hardware_flops(shape, 7, S("selective")) == factored_selective(shape, 7)
    L, s, h = shape.L, shape.s, shape.h
    full = factored_model(shape, 7) + 24 * 7 * L * s * h * h * (1 + Fraction(s, 6 * h))
    assert hardware_flops(shape, 7, S("full+seq")) == full


def test_no_recompute_ratio_one():
    shape = preset("22b").shape
    assert hardware_flops(shape, 4, S("none+seq")) == model_flops(shape, 4)


def test_text_variant():
    shape = preset("175b").shape
    L, s, h = shape.L, shape.s, shape.h
    diff = hardware_flops(shape, 2, S("selective"), variant="text") - model_flops(shape, 2)
    assert diff == 4 * 2 * L * s * s * h
    with pytest.raises(ValueError):
        hardware_flops(shape, 2, S("selective"), variant="other")


def test_limit_dominant_term():
    shape = ModelShape(a=8, h=8192, L=4, s=8, v=0)
    dominant = 72 * 1 * 4 * 8 * 8192 ** 2
    assert 0 < model_flops(shape, 1) / dominant - 1 < 1e-3


def test_overheads():
    assert float(hw_model_ratio(preset("175b").shape)) == pytest.approx(1.027, abs=1e-3)
    assert float(hw_model_ratio(preset("530b").shape)) == pytest.approx(1.016, abs=1e-3)
    assert approx_ratio(preset("175b").shape) == Fraction(1) + Fraction(2048, 6 * 12288)


def test_table_mfu_175b():
    cfg = preset("175b")
    mfu, hfu = mfu_hfu(cfg.shape, 64, S("selective+seq"), 13.75, cfg.hardware)
    assert round(mfu * 100, 1) == 51.4
    assert round(hfu * 100, 1) == 52.8


def test_mfu_errors():
    cfg = preset("175b")
    for bad in (0, -1.0):
        with pytest.raises(ValueError):
            mfu_hfu(cfg.shape, 64, S("full"), bad, cfg.hardware)


def test_microbatch_level_fraction():
    shape = preset("175b").shape
    with pytest.raises(ValueError):
        hardware_flops(shape, 8, S("full+mblevel"))
    with pytest.raises(ValueError):
        hardware_flops(shape, 8, S("full+mblevel"), recompute_fraction=Fraction(3, 2))
    assert hardware_flops(shape, 8, S("full+mblevel"), Fraction(0)) == model_flops(shape, 8)
    assert hardware_flops(shape, 8, S("full+mblevel"), Fraction(1)) == hardware_flops(shape, 8, S("full"))
    half = hardware_flops(shape, 8, S("full+mblevel"), Fraction(1, 2))
    assert half == (hardware_flops(shape, 8, S("full")) + model_flops(shape, 8)) / 2


def test_selective_equation_crosses_full_at_s_equals_3h():
    shape = ModelShape(a=1, h=1, L=1, s=3, v=0)
    assert hardware_flops(shape, 1, S("selective")) == hardware_flops(shape, 1, S("full"))


def test_unknown_strategy():
    with pytest.raises(TypeError):
        hardware_flops(preset("22b").shape, 1, "selective")


def test_predicted_speedup_range():
    for name in ("22b", "175b", "530b", "1t"):
        cfg = preset(name)
        speed = predicted_speedup(cfg.shape, cfg.layout.batch_per_iteration, S("full"), S("selective+seq"))
        assert 0.2 < speed < 0.4


def test_report_fields():
    cfg = preset("175b")
    rep = flops_report(cfg.shape, 64, S("selective+seq"), cfg.hardware, 13.75, 18.13)
    assert rep.mfu <= rep.hfu
    assert rep.throughput_increase == pytest.approx(18.13 / 13.75 - 1)
    assert round(rep.throughput_increase * 100, 1) == 31.9  # the published 31.8% is rounded from raw times
    bare = flops_report(cfg.shape, 64, S("none"), cfg.hardware)
    assert bare.mfu is None and bare.hw_model_ratio == 1


@st.composite
def shapes(draw):
    a = draw(st.integers(1, 64))
    return ModelShape(a=a, h=a * draw(st.integers(1, 256)), L=draw(st.integers(1, 128)),
                      s=draw(st.integers(1, 8192)), v=draw(st.integers(0, 100000)))


@given(shapes(), st.integers(1, 1024))
@settings(max_examples=300, deadline=None)
def test_strategy_ordering_and_linearity(shape, B):
    none, sel, full = (hardware_flops(shape, B, S(n)) for n in ("none", "selective", "full"))
    text = hardware_flops(shape, B, S("selective"), variant="text")
    assert none < text < full
    # 12BLs²h overtakes 24BLsh² + 4BLs²h once s >= 3h
    assert (none < sel < full) == (shape.s < 3 * shape.h)
    assert model_flops(shape, 2 * B) == 2 * model_flops(shape, B)
    hw = Hardware(devices=3)
    mfu, hfu = mfu_hfu(shape, B, S("selective"), 1.0, hw)
    assert mfu <= hfu
