import numpy as np
import pytest

from econvnext.attention import AttentionKind, ESE, SqueezeExcite, attention_cost, make_attention
from econvnext.builder import make_block
from econvnext.config import BlockKind, BlockType
from econvnext.errors import ShapeError
from econvnext.layers import (
    BatchNorm2d, ChannelsLastLinear, Conv2d, LayerNorm2d, LayerScale, Linear, symbolic, trunc_normal,
)


def test_trunc_normal_bounds_and_std():
    w = trunc_normal(np.random.default_rng(0), (200, 200))
    assert np.abs(w).max() <= 0.04 + 1e-12
    assert 0.015 < w.std() < 0.02


def test_symbolic_weights_use_no_memory():
    with symbolic():
        c = Conv2d(512, 512, 3)
    assert c.weight.data.strides == (0, 0, 0, 0)


def test_conv_param_count():
    assert Conv2d(3, 8, 3).param_count() == 3 * 8 * 9 + 8
    assert Conv2d(3, 8, 3, bias=False).param_count() == 3 * 8 * 9
    assert Conv2d(8, 8, 7, groups=8, bias=False).param_count() == 8 * 49


def test_norm_param_counts():
    assert BatchNorm2d(16).param_count() == 32
    assert LayerNorm2d(16, channels_last=True).param_count() == 32


def test_linear_shapes(rng):
    lin = Linear(5, 3)
    assert lin(rng.standard_normal((4, 5))).shape == (4, 3)
    cl = ChannelsLastLinear(5, 7)
    assert cl(rng.standard_normal((2, 5, 3, 3))).shape == (2, 7, 3, 3)


def test_layer_scale_init():
    ls = LayerScale(4, 1e-6)
    x = np.ones((1, 4, 2, 2))
    np.testing.assert_allclose(ls(x), 1e-6)


def test_ese_gate_is_hard_sigmoid_of_fc(rng):
    ese = ESE(4, rng=rng)
    x = rng.standard_normal((2, 4, 3, 3))
    s = x.mean(axis=(2, 3))
    w = ese.weight.data[:, :, 0, 0]
    expect = np.clip((s @ w.T + ese.bias.data + 3) / 6, 0, 1)
    np.testing.assert_allclose(ese.gate(x), expect)
    np.testing.assert_allclose(ese(x), x * expect[:, :, None, None])


def test_attention_rejects_wrong_width(rng):
    with pytest.raises(ShapeError):
        ESE(4, rng=rng)(np.zeros((1, 5, 2, 2)))


@pytest.mark.parametrize("kind,c,flops,params", [
    (AttentionKind.ESE, 64, 64 * 64, 64 * 64 + 64),
    (AttentionKind.SE, 64, 2 * 64 * 16, 2 * 64 * 16 + 16 + 64),
    (AttentionKind.EFF, 64, 2 * 256 * 64, 2 * 256 * 64 + 64 + 256),
    (AttentionKind.NONE, 64, 0, 0),
])
def test_attention_cost_table(kind, c, flops, params):
    cost = attention_cost(kind, c)
    assert (cost.flops, cost.params) == (flops, params)
    layer = make_attention(kind, c)
    if layer is not None:
        assert layer.param_count() == params


def test_se_hidden_width():
    se = SqueezeExcite(16, 4)
    assert se.param_count() == 16 * 4 * 2 + 4 + 16


def test_block_preserves_shape(rng):
    for kind in (BlockKind(BlockType.BNCONV, AttentionKind.ESE), BlockKind(BlockType.LNFC, AttentionKind.NONE, 1e-6),
                 BlockKind(BlockType.BNCONV, AttentionKind.EFF)):
        blk = make_block(8, kind, rng)
        x = rng.standard_normal((2, 8, 6, 6))
        assert blk(x).shape == x.shape
