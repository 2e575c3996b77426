import time

import pytest

from econvnext import build, conv_flops, dwconv_flops, model_cost, narrow, param_count, preset
from econvnext.config import scaled_tiny
from econvnext.cost import calibrate, human, worked_blocks


def test_conv_formulas():
    assert conv_flops(256, 56, 56, 1, 64) == 51_380_224
    assert conv_flops(64, 56, 56, 3, 64) == 115_605_504
    assert dwconv_flops(56, 56, 7, 96) == 14_751_744


def test_human_format():
    assert human(2_040_000_000) == "2.04G"
    assert human(13_236_360) == "13.2M"
    assert human(950) == "950"


def test_worked_blocks_terms():
    resnet, cspresnet, convnext, cspconvnext = worked_blocks()
    assert [t[1] for t in resnet.terms] == [51_380_224, 115_605_504, 51_380_224]
    assert cspconvnext.total == 65_178_624 and cspconvnext.check()
    assert resnet.check() and cspresnet.check()
    assert convnext.total == 245_962_752


def test_reference_and_tiny_totals():
    ref = model_cost(preset("convnext_tiny_ref"))
    tiny = model_cost(preset("e_convnext_tiny"))
    assert ref.total_flops == pytest.approx(4.47e9, rel=0.03)
    assert ref.total_params == pytest.approx(28.6e6, rel=0.05)
    assert tiny.total_flops == pytest.approx(2.04e9, rel=0.03)
    assert tiny.total_params == pytest.approx(13.2e6, rel=0.05)


def test_macs2_doubles_flops_only():
    a = model_cost(preset("e_convnext_tiny"))
    b = model_cost(preset("e_convnext_tiny"), macs2=True)
    assert b.total_flops == 2 * a.total_flops and b.total_params == a.total_params


def test_report_rows_and_json_are_stable():
    r = model_cost(preset("e_convnext_tiny"))
    assert r.rows[0].name == "stem.conv1.conv" and r.rows[0].out_dims == (32, 112, 112)
    assert r.to_json() == model_cost(preset("e_convnext_tiny")).to_json()
    assert "1 multiply-accumulate = 1 FLOP" in r.to_text(rows=False)


def test_param_count_matches_materialized_weights():
    g = build(narrow(preset("e_convnext_tiny")), seed=0)
    assert param_count(g) == sum(p.data.size for _, p in g.named_parameters())
    assert model_cost(g).total_params == param_count(g)


def test_empty_graph_cost():
    r = model_cost(None)
    assert r.total_flops == 0 and r.total_params == 0


def test_flops_scale_with_resolution():
    a = model_cost(preset("e_convnext_tiny"), (224, 224)).total_flops
    b = model_cost(preset("e_convnext_tiny"), (448, 448)).total_flops
    assert 3.9 < b / a <= 4.0


def test_cost_of_full_presets_is_fast():
    t = time.perf_counter()
    for name in ("convnext_tiny_ref", "e_convnext_tiny", "e_convnext_small"):
        model_cost(preset(name))
    assert time.perf_counter() - t < 1.0


def test_non_paper_flag_propagates():
    assert model_cost(scaled_tiny(0.5)).non_paper_config
    assert not model_cost(preset("e_convnext_tiny")).non_paper_config


def test_calibrate_returns_sorted_candidates():
    found = calibrate(0.93e9, 7.6e6, widths=[0.625, 0.75], stems=(24, 32), depth_choices=((3,), (3,), (6, 9), (3,)))
    assert found and found == sorted(found, key=lambda c: c.error)
    assert found[0].error < 0.05
