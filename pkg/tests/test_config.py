import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from econvnext import PRESET_NAMES, ArchConfig, ConfigurationError, narrow, preset
from econvnext.attention import AttentionKind
from econvnext.config import SplitKind, StageSpec, StemKind


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_validate_and_roundtrip(name):
    cfg = preset(name).validate()
    again = ArchConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("resnet50")


def test_ch_mid_rules():
    assert StageSpec(64, 128, 3).ch_mid == 96
    assert StageSpec(64, 128, 3, use_ch_mid=False).ch_mid == 128
    assert StageSpec(64, 128, 3, csp=False).branch_width == 128


def test_validate_catches_channel_chain():
    cfg = preset("e_convnext_tiny")
    cfg.stages[2].ch_in = 200
    with pytest.raises(ConfigurationError, match="stage 3"):
        cfg.validate()


def test_validate_catches_zero_blocks_and_bad_input():
    cfg = preset("e_convnext_tiny")
    cfg.stages[0].n_blocks = 0
    with pytest.raises(ConfigurationError):
        cfg.validate()
    cfg = preset("e_convnext_tiny")
    cfg.input_size = (100, 100)
    with pytest.raises(ConfigurationError, match="divisible"):
        cfg.validate()


def test_odd_ch_mid_rejected():
    cfg = preset("e_convnext_tiny")
    cfg.stages[0] = StageSpec(63, 128, 3)
    with pytest.raises(ConfigurationError):
        cfg.validate()


def test_downsample_factor():
    assert preset("e_convnext_tiny").downsample_factor == 32
    assert preset("convnext_tiny_ref").downsample_factor == 32


def test_narrow_is_marked_non_paper():
    cfg = narrow(preset("e_convnext_tiny"))
    assert cfg.non_paper and cfg.num_classes == 4 and cfg.input_size == (64, 64)
    cfg.validate()


@settings(max_examples=30, deadline=None)
@given(stem=st.sampled_from(list(StemKind)), split=st.sampled_from(list(SplitKind)),
       att=st.sampled_from(list(AttentionKind)), use_mid=st.booleans(), k=st.integers(1, 20))
def test_json_roundtrip_property(stem, split, att, use_mid, k):
    cfg = preset("e_convnext_tiny")
    cfg.stem, cfg.stage_attention, cfg.num_classes = stem, AttentionKind.ESE, k
    cfg.block.attention = att
    for s in cfg.stages:
        s.split_kind, s.use_ch_mid = split, use_mid
    assert ArchConfig.from_json(cfg.to_json()) == cfg
