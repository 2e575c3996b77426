import numpy as np
import pytest

from econvnext import build, model_cost, narrow, preset
from econvnext.errors import ConfigurationError
from econvnext.layers import Conv2d
from econvnext.tensor import ConvParams, NormParams
from econvnext.verify import (
    ORACLES, bench_norm, fold_batchnorms, fold_bn_into_conv, grad_check, instrumented_macs, max_rel_err,
    naive_conv2d, random_small_config, run_grad_suite, run_mac_suite, run_oracle_suite,
)


def test_max_rel_err():
    assert max_rel_err([1.0, 2.0], [1.0, 2.0]) == 0
    assert max_rel_err([1.0, 2.0], [1.0, 2.2]) == pytest.approx(0.2 / 2.2)
    with pytest.raises(ValueError):
        max_rel_err([1.0], [1.0, 2.0])


def test_naive_conv_identity_kernel():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(naive_conv2d(x, w, None, 1, 1), x)


@pytest.mark.parametrize("name", list(ORACLES))
def test_each_oracle_few_seeds(name):
    assert max(ORACLES[name](s) for s in range(3)) <= 1e-6


def test_oracle_suite_reports():
    res = run_oracle_suite(seeds=2)
    assert len(res) == 5 and all(r.passed for r in res)
    assert "PASS" in str(res[0])


def test_grad_check_catches_wrong_backward(rng):
    conv = Conv2d(2, 2, 3, rng=rng)
    orig = conv.backward
    conv.backward = lambda cache, g: 2 * orig(cache, g)
    rep = grad_check(conv, rng.standard_normal((1, 2, 4, 4)))
    assert not rep.passed


def test_grad_suite_passes():
    reports = run_grad_suite()
    failed = [str(r) for r in reports if not r.passed]
    assert not failed, failed


def test_fold_requires_eval_mode(rng):
    conv = ConvParams(rng.standard_normal((2, 2, 1, 1)), None)
    with pytest.raises(ConfigurationError):
        fold_bn_into_conv(conv, NormParams.batchnorm(2))
    with pytest.raises(ConfigurationError):
        fold_bn_into_conv(conv, NormParams.layernorm(2))


def test_fold_whole_graph_preserves_eval_output():
    g = build(narrow(preset("e_convnext_tiny")), seed=0)
    x = np.random.default_rng(0).standard_normal((4, 3, 64, 64))
    for _ in range(3):
        g(x, train=True)  # move running stats off their init
    folded, n = fold_batchnorms(g)
    assert n > 0
    assert max_rel_err(folded(x), g(x)) <= 1e-9
    assert folded.param_count() < g.param_count()


def test_instrumented_matches_analytic_on_narrow_tiny():
    g = build(narrow(preset("e_convnext_tiny")), seed=0)
    assert instrumented_macs(g) == model_cost(g).total_flops


def test_mac_suite_random_graphs():
    checks = run_mac_suite(graphs=5, seed=7)
    assert len(checks) == 5 and all(c.passed for c in checks)


def test_random_configs_vary():
    names = {random_small_config(s).name.split("<")[1] for s in range(20)}
    assert len(names) >= 3


def test_bench_norm_small():
    ln_s, bn_s = bench_norm(8, 8, 4, 2, iters=2)
    assert ln_s > 0 and bn_s > 0
    with pytest.raises(ValueError):
        bench_norm(iters=0)


def test_fold_param_delta_is_minus_c_per_fold():
    from econvnext.layers import BatchNorm2d

    def bn_channels(layer):
        total = 0
        stack = [layer]
        while stack:
            cur = stack.pop()
            if type(cur) is BatchNorm2d:
                total += cur.param_count() // 2
            stack += [c for _, c in cur.children()]
        return total

    g = build(narrow(preset("e_convnext_tiny")), seed=0)
    folded, _ = fold_batchnorms(g)
    removed_c = bn_channels(g) - bn_channels(folded)
    # BN's 2c affine disappears and the bias-free conv gains a c-wide bias
    assert g.param_count() - folded.param_count() == removed_c
    rows = {r.name for r in model_cost(folded).rows}
    assert "stem.conv1.norm" not in rows
