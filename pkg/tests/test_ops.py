import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from econvnext import ops
from econvnext.errors import ConfigurationError, DegenerateStatisticsError, ShapeError
from econvnext.tensor import ConvParams, NormParams, Parameter, as_tensor, conv_padding
from econvnext.verify import naive_conv2d


def test_as_tensor_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3, 4, 4)))


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (7, 1, 3), (2, 2, 0), (4, 4, 0), (3, 2, 1)])
def test_conv_padding(k, stride, pad):
    assert conv_padding(k, stride) == pad


def test_conv_output_shape_and_bias(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    p = ConvParams(rng.standard_normal((5, 3, 2, 2)), np.arange(5.0), stride=2)
    y = ops.conv2d_forward(x, p)
    assert y.shape == (2, 5, 4, 4)
    np.testing.assert_allclose(y, naive_conv2d(x, p.weight, p.bias, 2, 0), atol=1e-12)


def test_depthwise_conv_matches_naive(rng):
    x = rng.standard_normal((1, 4, 9, 9))
    p = ConvParams(rng.standard_normal((4, 1, 7, 7)), None, stride=1, groups=4)
    assert p.depthwise
    np.testing.assert_allclose(ops.conv2d_forward(x, p), naive_conv2d(x, p.weight, None, 1, 3, 4), atol=1e-12)


def test_conv_channel_mismatch_raises(rng):
    p = ConvParams(rng.standard_normal((4, 3, 3, 3)), None)
    with pytest.raises((ShapeError, ConfigurationError)):
        ops.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), p)


def test_mac_counter_tallies_conv_and_fc(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    p = ConvParams(rng.standard_normal((4, 3, 3, 3)), None)
    with ops.count_macs() as box:
        ops.conv2d_forward(x, p)
        ops.fully_connected(rng.standard_normal((1, 4)), rng.standard_normal((6, 4)))
    assert box[0] == 3 * 8 * 8 * 9 * 4 + 24


def test_batchnorm_train_normalizes_and_updates_running_stats(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    p = NormParams.batchnorm(3)
    y = ops.batchnorm_forward(x, p)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = 4 * 25
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    p = NormParams.batchnorm(2, running_mean=np.array([1.0, -1.0]), running_var=np.array([4.0, 0.25]), mode="eval")
    y = ops.batchnorm_forward(x, p)
    expect = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var + p.eps)[None, :, None, None]
    np.testing.assert_allclose(y, expect)


def test_batchnorm_single_value_is_degenerate():
    with pytest.raises(DegenerateStatisticsError):
        ops.batchnorm_forward(np.ones((1, 2, 1, 1)), NormParams.batchnorm(2))


def test_norm_params_validation():
    with pytest.raises(ConfigurationError):
        NormParams.batchnorm(2, eps=0.0)
    with pytest.raises(ConfigurationError):
        NormParams.batchnorm(2, momentum=1.5)


def test_layernorm_normalizes_each_position(rng):
    x = rng.standard_normal((2, 6, 3, 3)) * 5 + 1
    y = ops.layernorm_forward(x, NormParams.layernorm(6))
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 41)
    np.testing.assert_allclose(ops.gelu(x), 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


def test_hard_sigmoid_values():
    np.testing.assert_allclose(ops.hard_sigmoid(np.array([-5.0, -3.0, 0.0, 1.5, 3.0, 9.0])),
                               [0, 0, 0.5, 0.75, 1, 1])


def test_split_concat_roundtrip(rng):
    x = rng.standard_normal((2, 6, 2, 2))
    a, b = ops.split_channels(x, 2)
    assert a.shape[1] == 2 and b.shape[1] == 4
    np.testing.assert_array_equal(ops.concat_channels(a, b), x)


def test_concat_rejects_mismatched_spatial(rng):
    with pytest.raises(ShapeError):
        ops.concat_channels(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 4)))


def test_add_requires_equal_shapes():
    with pytest.raises(ShapeError):
        ops.add(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))


def test_parameter_grad_is_lazy_and_accumulates():
    p = Parameter(np.ones((2, 3)))
    assert p.decay
    np.testing.assert_array_equal(p.grad, 0)
    p.accumulate(np.ones((2, 3)))
    p.accumulate(np.ones((2, 3)))
    np.testing.assert_array_equal(p.grad, 2)
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, 0)
    assert not Parameter(np.ones(3)).decay


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6),
       k=st.sampled_from([1, 3]), seed=st.integers(0, 1000))
def test_conv_matches_naive_property(n, c, h, w, k, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    p = ConvParams(r.standard_normal((3, c, k, k)), r.standard_normal(3))
    np.testing.assert_allclose(ops.conv2d_forward(x, p), naive_conv2d(x, p.weight, p.bias, 1, k // 2), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(c=st.integers(2, 8), seed=st.integers(0, 1000))
def test_global_avg_pool_property(c, seed):
    x = np.random.default_rng(seed).standard_normal((2, c, 3, 5))
    np.testing.assert_allclose(ops.global_avg_pool(x)[:, :, 0, 0], x.mean(axis=(2, 3)))
