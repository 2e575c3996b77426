"""Gradient checks, equivalence oracles, BatchNorm folding and the norm microbenchmark."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .attention import AttentionKind, ESE, SqueezeExcite
from .builder import CSPStage, LayerGraph, make_block, make_head
from .config import BlockKind, BlockType, SplitKind, StageSpec
from .cost import model_cost
from .errors import ConfigurationError
from .layers import (
    Activation, BatchNorm2d, ChannelsLastLinear, Conv2d, GlobalAvgPool, Layer, LayerNorm2d, LayerScale,
    Sequential,
)
from .tensor import ConvParams, NormKind, NormParams, Parameter


GRAD_FLOOR = 1e-5


def max_rel_err(actual, expected, floor: float = 1e-12) -> float:
    """max|a - e| scaled by the largest magnitude in either array."""
    a, e = np.asarray(actual, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {e.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(e).max(), floor)
    return float(np.abs(a - e).max() / scale)


# ---------------------------------------------------------------------------
# naive references
# ---------------------------------------------------------------------------


def naive_conv2d(x, weight, bias=None, stride=1, pad=0, groups=1) -> np.ndarray:
    """Direct nested-loop cross-correlation; out-of-range taps are skipped instead of padded."""
    n, c, h, w = x.shape
    co, cpg, k, _ = weight.shape
    cog = co // groups
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            g = o // cog
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(cpg):
                        for ky in range(k):
                            iy = oy * stride + ky - pad
                            if not 0 <= iy < h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - pad
                                if 0 <= ix < w:
                                    acc += x[b, g * cpg + ci, iy, ix] * weight[o, ci, ky, kx]
                    out[b, o, oy, ox] = acc
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"{verdict}  {self.name:<28} max rel err {self.max_error:.2e} (worst: {worst}, tol {self.tolerance:g})"


def grad_check(layer: Layer, x, tolerance: float = 1e-4, h: float = 1e-5, seed: int = 0,
               train: bool = True, max_entries: Optional[int] = None, name: str = "") -> GradCheckReport:
    """Compare backprop with central differences of ``sum(layer(x) * R)`` for a fixed random R.

    Runs in float64. ``max_entries`` caps how many entries per parameter group are probed.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    for _, p in layer.named_parameters():
        p.data = np.array(p.data, dtype=np.float64)
    y, cache = layer.forward(x, train)
    r = rng.standard_normal(np.shape(y))

    def loss(inp):
        return float(np.sum(layer.forward(inp, train)[0] * r))

    layer.zero_grad()
    gx = layer.backward(cache, r)
    groups = [("input", x, gx)] + [(k, p.data, p.grad.copy()) for k, p in layer.named_parameters()]
    errors = {}
    for gname, arr, analytic in groups:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss(x)
            flat[i] = old - h
            fm = loss(x)
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        # groups whose exact gradient is 0 (a bias feeding a train-mode BN) would otherwise
        # compare finite-difference noise with itself
        errors[gname] = max_rel_err(analytic.reshape(-1)[idx], numeric, floor=GRAD_FLOOR)
    return GradCheckReport(name or type(layer).__name__, errors, tolerance)


class _LossLayer(Layer):
    """Wrap smoothed cross-entropy so grad_check can probe it like a layer."""

    def __init__(self, labels, smoothing):
        self.labels, self.smoothing = labels, smoothing

    def forward(self, x, train=False):
        from .train import smoothed_cross_entropy

        loss, g = smoothed_cross_entropy(x, self.labels, self.smoothing)
        return np.array([loss]), g

    def backward(self, cache, grad):
        return cache * grad[0]


def _grad_cases(seed: int = 0) -> List[Tuple[str, Layer, Tuple[int, ...]]]:
    rng = np.random.default_rng(seed)
    ls_block = BlockKind(BlockType.LNFC, AttentionKind.NONE, 0.5)
    stage_spec = StageSpec(4, 8, 1, use_ch_mid=True, split_kind=SplitKind.CONV_PAIR)
    return [
        ("conv3x3", Conv2d(3, 4, 3, rng=rng), (2, 3, 5, 5)),
        ("conv2x2/s2", Conv2d(3, 4, 2, 2, rng=rng), (2, 3, 4, 4)),
        ("conv grouped", Conv2d(4, 6, 3, groups=2, rng=rng), (2, 4, 5, 5)),
        ("dwconv7x7", Conv2d(3, 3, 7, groups=3, rng=rng), (2, 3, 6, 6)),
        ("batchnorm train", BatchNorm2d(3), (4, 3, 3, 3)),
        ("layernorm ch-first", LayerNorm2d(4), (2, 4, 3, 3)),
        ("layernorm ch-last", LayerNorm2d(4, channels_last=True), (2, 4, 3, 3)),
        ("gelu", Activation("gelu"), (2, 3, 3, 3)),
        ("sigmoid", Activation("sigmoid"), (2, 3, 3, 3)),
        ("hard_sigmoid", Activation("hard_sigmoid"), (2, 3, 3, 3)),
        ("global avg pool", GlobalAvgPool(), (2, 3, 4, 4)),
        ("channels-last FC", ChannelsLastLinear(3, 5, rng=rng), (2, 3, 3, 3)),
        ("layer scale", LayerScale(3, 0.7), (2, 3, 3, 3)),
        ("ESE", ESE(4, rng=rng), (2, 4, 3, 3)),
        ("SE r=4", SqueezeExcite(8, 2, rng=rng), (2, 8, 3, 3)),
        ("head GAP+FC", make_head(4, 3, rng=rng), (2, 4, 2, 2)),
        ("BNConv block", make_block(4, BlockKind(BlockType.BNCONV), rng), (2, 4, 5, 5)),
        ("BNConv+ESE block", make_block(4, BlockKind(BlockType.BNCONV, AttentionKind.ESE), rng), (2, 4, 5, 5)),
        ("LNFC block", make_block(4, ls_block, rng), (2, 4, 5, 5)),
        ("CSP stage + ESE", CSPStage(stage_spec, BlockKind(BlockType.BNCONV, AttentionKind.ESE), True, "bn",
                                     AttentionKind.ESE, rng), (2, 4, 8, 8)),
    ]


def run_grad_suite(tolerance: float = 1e-4, seed: int = 0) -> List[GradCheckReport]:
    """Finite-difference check for every layer type plus one CSP stage with ESE."""
    reports = []
    for i, (name, layer, shape) in enumerate(_grad_cases(seed)):
        x = np.random.default_rng(seed + 100 + i).standard_normal(shape)
        # keep hard-sigmoid inputs off its kinks at +-3
        if name == "hard_sigmoid":
            x = np.clip(x, -2.5, 2.5) * 2
        reports.append(grad_check(layer, x, tolerance, seed=seed, name=name))
    # pure-input ops without parameters
    rng = np.random.default_rng(seed + 7)
    a, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 2, 3, 3))
    reports.append(_check_binary("concat/split", a, b, tolerance))
    logits = rng.standard_normal((3, 5))
    reports.append(grad_check(_LossLayer(np.array([0, 3, 4]), 0.1), logits, tolerance, name="smoothed CE"))
    return reports


def _check_binary(name, a, b, tolerance, h=1e-5):
    r = np.random.default_rng(0).standard_normal((a.shape[0], a.shape[1] + b.shape[1]) + a.shape[2:])

    def f(a_, b_):
        return float(np.sum(ops.concat_channels(a_, b_) * r))

    ga, gb = ops.split_channels(r, a.shape[1])
    errs = {}
    for label, arr, g in (("a", a, ga), ("b", b, gb)):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(a, b)
            flat[i] = old - h
            fm = f(a, b)
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        errs[label] = max_rel_err(g, num, floor=GRAD_FLOOR)
    return GradCheckReport(name, errs, tolerance)


# ---------------------------------------------------------------------------
# BatchNorm folding
# ---------------------------------------------------------------------------


def fold_bn_into_conv(conv: ConvParams, bn: NormParams) -> ConvParams:
    """Return conv' with conv'(x) == bn(conv(x)) for an eval-mode BatchNorm."""
    if bn.kind is not NormKind.BATCH:
        raise ConfigurationError("only BatchNorm folds into a convolution")
    if bn.mode != "eval":
        raise ConfigurationError("cannot fold a train-mode BatchNorm (batch statistics vary)")
    if len(bn.gamma) != conv.c_out:
        raise ConfigurationError(f"BN over {len(bn.gamma)} channels after conv with {conv.c_out} outputs")
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    bias = np.zeros(conv.c_out) if conv.bias is None else conv.bias
    return ConvParams(
        weight=conv.weight * scale[:, None, None, None],
        bias=(bias - bn.running_mean) * scale + bn.beta,
        stride=conv.stride,
        groups=conv.groups,
        padding=conv.padding,
    )


def _folded_layer(conv: Conv2d, bn: BatchNorm2d) -> Conv2d:
    p = fold_bn_into_conv(conv.conv_params(), bn.norm_params(train=False))
    new = copy.copy(conv)
    new.weight = Parameter(p.weight)
    new.bias = Parameter(p.bias)
    return new


def fold_batchnorms(graph: Layer) -> Tuple[Layer, int]:
    """Deep-copy ``graph`` and fold every conv -> BatchNorm pair. Returns (folded, n_folds)."""
    graph = copy.deepcopy(graph)
    count = 0

    def visit(layer: Layer):
        nonlocal count
        if isinstance(layer, Sequential):
            out = []
            items = layer.layers
            i = 0
            while i < len(items):
                name, cur = items[i]
                nxt = items[i + 1][1] if i + 1 < len(items) else None
                if isinstance(cur, Conv2d) and type(nxt) is BatchNorm2d:
                    out.append((name, _folded_layer(cur, nxt)))
                    count += 1
                    i += 2
                    continue
                visit(cur)
                out.append((name, cur))
                i += 1
            layer.layers = out
        else:
            for _, child in layer.children():
                visit(child)

    visit(graph)
    return graph, count


# ---------------------------------------------------------------------------
# equivalence oracles
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    name: str
    errors: List[float] = field(default_factory=list)
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.max_error <= self.tolerance

    def __str__(self):
        return (f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} max rel err {self.max_error:.2e} "
                f"over {len(self.errors)} seeds (tol {self.tolerance:g})")


def oracle_naive_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 2, 3, 7]))
    n, c = rng.integers(1, 5, size=2)
    co = int(rng.integers(1, 5))
    h, w = rng.integers(max(k - 2, 1), 9, size=2)
    stride = k if k == 2 and h % 2 == 0 and w % 2 == 0 and rng.random() < 0.5 else 1
    x = rng.standard_normal((n, c, h, w))
    p = ConvParams(rng.standard_normal((co, c, k, k)), rng.standard_normal(co), stride)
    y = ops.conv2d_forward(x, p)
    return max_rel_err(y, naive_conv2d(x, p.weight, p.bias, stride, p.pad))


def oracle_layernorm_layouts(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 4, 5)) * 3 + 1
    first = NormParams.layernorm(6)
    first.gamma[:] = rng.standard_normal(6)
    first.beta[:] = rng.standard_normal(6)
    last = NormParams(NormKind.LN_LAST, first.gamma, first.beta, eps=first.eps)
    return max_rel_err(ops.layernorm_forward(x, first), ops.layernorm_forward(x, last))


def oracle_fc_vs_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c, classes = 16, 10
    head = make_head(c, classes, rng=rng)
    x = rng.standard_normal((3, c, 4, 4))
    logits = head(x)
    fc = head["fc"]
    pooled = ops.global_avg_pool(x)
    as_conv = ops.conv2d_forward(pooled, ConvParams(fc.weight.data[:, :, None, None], fc.bias.data))
    return max_rel_err(logits, as_conv[:, :, 0, 0])


def selection_init(stage: CSPStage) -> None:
    """Set the split conv pair to copy channels [0, half) and [half, ch_mid)."""
    cm = stage.spec.ch_mid
    half = cm // 2
    eye = np.eye(cm)
    stage.split_a.weight.data = eye[:half, :, None, None].copy()
    stage.split_b.weight.data = eye[half:, :, None, None].copy()
    stage.split_a.bias.data = np.zeros(half)
    stage.split_b.bias.data = np.zeros(half)


def oracle_split_kinds(seed: int) -> float:
    rng = np.random.default_rng(seed)
    block = BlockKind(BlockType.BNCONV, AttentionKind.ESE)
    conv_spec = StageSpec(8, 16, 2, use_ch_mid=True, split_kind=SplitKind.CONV_PAIR)
    tens_spec = StageSpec(8, 16, 2, use_ch_mid=True, split_kind=SplitKind.TENSOR)
    conv_stage = CSPStage(conv_spec, block, True, rng=np.random.default_rng(seed))
    tens_stage = CSPStage(tens_spec, block, True, rng=np.random.default_rng(seed))
    selection_init(conv_stage)
    for name in ("down", "blocks", "merge"):
        src = dict(getattr(tens_stage, name).named_parameters())
        for k, p in getattr(conv_stage, name).named_parameters():
            src[k].data = p.data.copy()
    x = rng.standard_normal((2, 8, 8, 8))
    return max_rel_err(conv_stage(x), tens_stage(x))


def oracle_bn_fold(seed: int) -> float:
    rng = np.random.default_rng(seed)
    c_in, c_out = 3, 5
    conv = ConvParams(rng.standard_normal((c_out, c_in, 3, 3)), None, 1)
    bn = NormParams.batchnorm(c_out, mode="eval")
    bn.gamma[:] = rng.uniform(0.5, 2.0, c_out)
    bn.beta[:] = rng.standard_normal(c_out)
    bn.running_mean[:] = rng.standard_normal(c_out)
    bn.running_var[:] = rng.uniform(0.2, 3.0, c_out)
    x = rng.standard_normal((2, c_in, 6, 6))
    composed = ops.batchnorm_forward(ops.conv2d_forward(x, conv), bn)
    folded = ops.conv2d_forward(x, fold_bn_into_conv(conv, bn))
    return max_rel_err(folded, composed)


ORACLES: Dict[str, Callable[[int], float]] = {
    "naive-loop conv vs engine conv": oracle_naive_conv,
    "LN channel-first vs channel-last": oracle_layernorm_layouts,
    "FC head vs 1x1-conv head": oracle_fc_vs_conv,
    "tensor split vs selection 1x1 split": oracle_split_kinds,
    "BN fold vs conv+BN": oracle_bn_fold,
}


def run_oracle_suite(seeds: int = 10, tolerance: float = 1e-6) -> List[OracleResult]:
    results = []
    for name, fn in ORACLES.items():
        res = OracleResult(name, tolerance=tolerance)
        res.errors = [fn(s) for s in range(seeds)]
        results.append(res)
    return results


def instrumented_macs(graph: LayerGraph, input_size=None) -> int:
    """Multiply-accumulates actually executed by one eval forward of a single image."""
    h, w = input_size or graph.config.input_size
    with ops.count_macs() as box:
        graph(np.zeros((1, 3, h, w)), train=False)
    return box[0]


@dataclass
class MacCheck:
    name: str
    analytic: int
    counted: int

    @property
    def passed(self) -> bool:
        return self.analytic == self.counted

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44} analytic {self.analytic:,} counted {self.counted:,}"


def random_small_config(seed: int):
    """A narrow random variant of one of the presets, with flags and attention shuffled."""
    from dataclasses import replace

    from .config import PRESET_NAMES, narrow, preset

    rng = np.random.default_rng(seed)
    base = preset(PRESET_NAMES[int(rng.integers(len(PRESET_NAMES)))])
    blocks = tuple(int(b) for b in rng.integers(1, 3, size=4))
    cfg = narrow(base, float(rng.choice([1 / 16, 1 / 8])), blocks, int(rng.integers(2, 11)),
                 (int(rng.choice([32, 64])),) * 2)
    csp = any(st.csp for st in cfg.stages)
    if csp:
        cfg.stages = [replace(st, use_ch_mid=bool(rng.integers(2)), split_kind=list(SplitKind)[rng.integers(2)])
                      for st in cfg.stages]
        cfg.stage_attention = [AttentionKind.NONE, AttentionKind.ESE][rng.integers(2)]
    cfg.block = replace(cfg.block, attention=list(AttentionKind)[rng.integers(len(AttentionKind))])
    cfg.name = f"random{seed}<{base.name}>"
    try:
        cfg.validate()
    except ConfigurationError:
        return random_small_config(seed + 1000)
    return cfg


def run_mac_suite(graphs: int = 5, seed: int = 0) -> List[MacCheck]:
    """Analytic totals vs MACs counted while executing ``graphs`` random small networks."""
    from .builder import build

    out = []
    for i in range(graphs):
        cfg = random_small_config(seed + i)
        g = build(cfg, seed=i)
        out.append(MacCheck(cfg.name, model_cost(g).total_flops, instrumented_macs(g)))
    return out


# ---------------------------------------------------------------------------
# microbenchmark
# ---------------------------------------------------------------------------


def bench_norm(h: int = 56, w: int = 56, c: int = 64, batch: int = 8, iters: int = 10,
               seed: int = 0) -> Tuple[float, float]:
    """Seconds for ``iters`` forward+backward passes of 2x2/s2 conv -> LN and 2x2/s2 conv -> BN.

    Both norms run channel-first on an input of shape (batch, c, h, w).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, c, h, w))
    timings = []
    for norm in (LayerNorm2d(2 * c), BatchNorm2d(2 * c)):
        net = Sequential([("conv", Conv2d(c, 2 * c, 2, 2, bias=False, rng=seed)), ("norm", norm)])
        g = None
        t0 = time.perf_counter()
        for _ in range(iters):
            y, cache = net.forward(x, train=True)
            if g is None:
                g = np.ones_like(y)
            net.backward(cache, g)
        timings.append(time.perf_counter() - t0)
    return timings[0], timings[1]
