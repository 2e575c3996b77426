"""Turn an :class:`ArchConfig` into an executable :class:`LayerGraph`."""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .attention import AttentionKind, make_attention
from .config import ArchConfig, BlockKind, BlockType, SplitKind, StageSpec, StemKind, EXPANSION
from .errors import ShapeError
from .layers import (
    Activation, BatchNorm2d, ChannelsLastLinear, Conv2d, Flatten, GlobalAvgPool, Identity, Layer,
    LayerNorm2d, LayerScale, Linear, Sequential, _join, _rng, conv_norm_act, symbolic,
)

IN_CHANNELS = 3


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class ResidualBlock(Layer):
    """``x + branch(x)``."""

    def __init__(self, branch: Sequential, kind: BlockKind):
        self.branch = branch
        self.kind = kind

    def children(self):
        return self.branch.layers

    def forward(self, x, train=False):
        y, cache = self.branch.forward(x, train)
        return ops.add(x, y), cache

    def backward(self, cache, grad):
        g_skip, g_branch = ops.add_backward(grad)
        return g_skip + self.branch.backward(cache, g_branch)

    def out_shape(self, shape):
        out = self.branch.out_shape(shape)
        if out != tuple(shape):
            raise ShapeError(f"residual branch maps {shape} to {out}")
        return out

    def cost_rows(self, shape, prefix=""):
        return self.branch.cost_rows(shape, prefix)


def make_block(c: int, kind: BlockKind, rng=None) -> ResidualBlock:
    """Inverted-bottleneck residual block of width ``c`` (expansion 4).

    BNConv: dw7x7 -> BN -> 1x1 expand -> GELU -> 1x1 contract [-> BN -> attention].
    LNFC:   dw7x7 -> LN(channel-last) -> FC expand -> GELU -> FC contract [-> LayerScale] [-> BN -> attention].
    EffStyle attention instead sits after the expand activation, on the 4c width.
    """
    rng = _rng(rng)
    att = kind.attention
    wide = EXPANSION * c
    lnfc = kind.kind is BlockType.LNFC
    layers: List[Tuple[str, Layer]] = [
        ("dw", Conv2d(c, c, 7, groups=c, bias=lnfc, rng=rng)),
        ("norm", LayerNorm2d(c, channels_last=True) if lnfc else BatchNorm2d(c)),
        ("pw1", (ChannelsLastLinear(c, wide, rng=rng) if lnfc else Conv2d(c, wide, 1, rng=rng))),
        ("act", Activation("gelu")),
    ]
    if att is AttentionKind.EFF:
        layers += [("attn_norm", BatchNorm2d(wide)), ("attn", make_attention(att, c, rng=rng))]
    late_att = att in (AttentionKind.SE, AttentionKind.ESE)
    if lnfc:
        layers.append(("pw2", ChannelsLastLinear(wide, c, rng=rng)))
    else:
        layers.append(("pw2", Conv2d(wide, c, 1, bias=not late_att, rng=rng)))
    if lnfc and kind.layer_scale_init is not None:
        layers.append(("ls", LayerScale(c, kind.layer_scale_init)))
    if late_att:
        layers += [("attn_norm", BatchNorm2d(c)), ("attn", make_attention(att, c, rng=rng))]
    return ResidualBlock(Sequential(layers), kind)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class CSPStage(Layer):
    """down -> split into two ch_mid/2 paths -> blocks on the first -> concat -> [attention] -> merge."""

    def __init__(self, spec: StageSpec, block: BlockKind, downsample: bool, norm: str = "bn",
                 stage_attention: AttentionKind = AttentionKind.NONE, rng=None, allow_empty: bool = False):
        rng = _rng(rng)
        self.spec = spec
        cm, half = spec.ch_mid, spec.ch_mid // 2
        if downsample:
            self.down = conv_norm_act(spec.ch_in, cm, 2, 2, norm=norm, rng=rng)
        elif spec.ch_in != cm:
            self.down = conv_norm_act(spec.ch_in, cm, 1, 1, norm=norm, rng=rng)
        else:
            self.down = Identity()
        self.split_kind = spec.split_kind
        if spec.split_kind is SplitKind.CONV_PAIR:
            self.split_a = Conv2d(cm, half, 1, rng=rng)
            self.split_b = Conv2d(cm, half, 1, rng=rng)
        n = spec.n_blocks
        if n < 1 and not allow_empty:
            raise ValueError("CSP stage needs at least one block")
        self.blocks = Sequential([(str(i), make_block(half, block, rng)) for i in range(n)])
        self.attn_norm = self.attn = None
        if AttentionKind(stage_attention) is not AttentionKind.NONE:
            self.attn_norm = BatchNorm2d(cm)
            self.attn = make_attention(stage_attention, cm, rng=rng)
        self.merge = conv_norm_act(cm, spec.ch_out, 1, 1, norm=norm, rng=rng)

    def children(self):
        kids = [("down", self.down)]
        if self.split_kind is SplitKind.CONV_PAIR:
            kids += [("split_a", self.split_a), ("split_b", self.split_b)]
        kids.append(("blocks", self.blocks))
        if self.attn is not None:
            kids += [("attn_norm", self.attn_norm), ("attn", self.attn)]
        kids.append(("merge", self.merge))
        return kids

    def _split(self, d, train):
        if self.split_kind is SplitKind.CONV_PAIR:
            a, ca = self.split_a.forward(d, train)
            b, cb = self.split_b.forward(d, train)
            return a, b, (ca, cb)
        a, b = ops.split_channels(d, self.spec.ch_mid // 2)
        return a, b, None

    def forward(self, x, train=False):
        d, c_down = self.down.forward(x, train)
        a, b, c_split = self._split(d, train)
        a, c_blocks = self.blocks.forward(a, train)
        z = ops.concat_channels(a, b)
        c_attn = None
        if self.attn is not None:
            z, cn = self.attn_norm.forward(z, train)
            z, ca = self.attn.forward(z, train)
            c_attn = (cn, ca)
        y, c_merge = self.merge.forward(z, train)
        return y, (c_down, c_split, c_blocks, c_attn, c_merge)

    def backward(self, cache, grad):
        c_down, c_split, c_blocks, c_attn, c_merge = cache
        g = self.merge.backward(c_merge, grad)
        if self.attn is not None:
            g = self.attn.backward(c_attn[1], g)
            g = self.attn_norm.backward(c_attn[0], g)
        half = self.spec.ch_mid // 2
        ga, gb = g[:, :half], g[:, half:]
        ga = self.blocks.backward(c_blocks, ga)
        if self.split_kind is SplitKind.CONV_PAIR:
            gd = self.split_a.backward(c_split[0], ga) + self.split_b.backward(c_split[1], gb)
        else:
            gd = np.concatenate([ga, gb], axis=1)
        return self.down.backward(c_down, gd)

    def _shapes(self, shape):
        d = self.down.out_shape(shape)
        half = (d[0] // 2,) + d[1:]
        return d, half

    def out_shape(self, shape):
        d, half = self._shapes(shape)
        if d[0] != self.spec.ch_mid:
            raise ShapeError(f"stage expects ch_mid={self.spec.ch_mid}, got {d[0]}")
        self.blocks.out_shape(half)
        return self.merge.out_shape(d)

    def cost_rows(self, shape, prefix=""):
        d, half = self._shapes(shape)
        rows = self.down.cost_rows(shape, _join(prefix, "down"))
        if self.split_kind is SplitKind.CONV_PAIR:
            rows += self.split_a.cost_rows(d, _join(prefix, "split_a"))
            rows += self.split_b.cost_rows(d, _join(prefix, "split_b"))
        rows += self.blocks.cost_rows(half, _join(prefix, "blocks"))
        if self.attn is not None:
            rows += self.attn_norm.cost_rows(d, _join(prefix, "attn_norm"))
            rows += self.attn.cost_rows(d, _join(prefix, "attn"))
        rows += self.merge.cost_rows(d, _join(prefix, "merge"))
        return rows

    def trace(self, shape, prefix=""):
        d, half = self._shapes(shape)
        out = self.down.trace(shape, _join(prefix, "down")) if not isinstance(self.down, Identity) else []
        if self.split_kind is SplitKind.CONV_PAIR:
            out += [(_join(prefix, "split_a"), half), (_join(prefix, "split_b"), half)]
        else:
            out += [(_join(prefix, "split"), half)]
        for name, blk in self.blocks.layers:
            out.append((_join(prefix, f"block{int(name) + 1}"), blk.out_shape(half)))
        out.append((_join(prefix, "concat"), d))
        if self.attn is not None:
            out.append((_join(prefix, "attn"), d))
        out += self.merge.trace(d, _join(prefix, "merge"))
        return out


class PlainStage(Sequential):
    """ConvNeXt stage: [norm -> 2x2/s2 conv] -> blocks at full width."""

    def __init__(self, spec: StageSpec, block: BlockKind, downsample: bool, norm: str = "ln", rng=None):
        rng = _rng(rng)
        self.spec = spec
        layers: List[Tuple[str, Layer]] = []
        if downsample or spec.ch_in != spec.ch_out:
            k = 2 if downsample else 1
            nl = LayerNorm2d(spec.ch_in) if norm == "ln" else BatchNorm2d(spec.ch_in)
            layers += [("down_norm", nl), ("down", Conv2d(spec.ch_in, spec.ch_out, k, k, rng=rng))]
        layers += [(f"block{i + 1}", make_block(spec.ch_out, block, rng)) for i in range(spec.n_blocks)]
        super().__init__(layers)

    def trace(self, shape, prefix=""):
        out = []
        for name, layer in self.layers:
            shape = layer.out_shape(shape)
            out.append((_join(prefix, name), shape))
        return out


def make_stem(kind: StemKind, c_out: int, norm: str = "bn", rng=None) -> Sequential:
    rng = _rng(rng)
    kind = StemKind(kind)
    if kind is StemKind.PATCHIFY4:
        return conv_norm_act(IN_CHANNELS, c_out, 4, 4, norm=norm, act=None, rng=rng)
    if kind is StemKind.TWO_STEP2:
        # the second 2x2/s2 conv of this stem is the first stage's downsample
        return Sequential([("conv1", conv_norm_act(IN_CHANNELS, c_out, 2, 2, norm=norm, rng=rng))])
    mid = c_out // 2
    k0 = 2 if kind is StemKind.STEPPED else 3
    return Sequential([
        ("conv1", conv_norm_act(IN_CHANNELS, mid, k0, 2, norm=norm, rng=rng)),
        ("conv2", conv_norm_act(mid, mid, 3, 1, norm=norm, rng=rng)),
        ("conv3", conv_norm_act(mid, c_out, 3, 1, norm=norm, rng=rng)),
    ])


def make_head(c: int, num_classes: int, norm: bool = False, rng=None) -> Sequential:
    layers: List[Tuple[str, Layer]] = [("pool", GlobalAvgPool())]
    if norm:
        layers.append(("norm", LayerNorm2d(c)))
    layers += [("flatten", Flatten()), ("fc", Linear(c, num_classes, rng=rng))]
    return Sequential(layers)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class LayerGraph(Sequential):
    """Ordered stem / stage1..4 / head pipeline from (n, 3, H, W) to (n, num_classes) logits."""

    in_channels = IN_CHANNELS

    def __init__(self, config: ArchConfig, layers):
        super().__init__(layers)
        self.config = config

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != IN_CHANNELS:
            raise ShapeError(f"expected (n, 3, h, w) input, got {x.shape}")
        f = self.config.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by {f}")
        return x

    def forward(self, x, train=False):
        return super().forward(self._check_input(x), train)

    def state_dict(self) -> dict:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for k, v in state.items():
            if k in params:
                if params[k].data.shape != v.shape:
                    raise ShapeError(f"{k}: shape {v.shape} != {params[k].data.shape}")
                params[k].data[...] = v
            elif k in buffers:
                buffers[k][...] = v
            else:
                raise KeyError(k)

    def shape_trace(self, input_size: Optional[Tuple[int, int]] = None):
        shape = (IN_CHANNELS,) + tuple(input_size or self.config.input_size)
        out = []
        for name, part in self.layers:
            if name == "head":
                break
            out += part.trace(shape, name)
            shape = part.out_shape(shape)
            out.append((f"{name}_out", shape))
        out.append(("logits", self["head"].out_shape(shape)))
        return out


def build(config: ArchConfig, seed: int = 0, materialize: bool = True) -> LayerGraph:
    """Instantiate ``config`` with truncated-normal(0.02) weights drawn from ``seed``.

    ``materialize=False`` gives a graph with placeholder weights, good for
    shape tracing and cost analysis but not for execution.
    """
    if not materialize:
        with symbolic():
            return build(config, seed)
    config.validate()
    rng = np.random.default_rng(seed)
    norm = config.downsample_norm
    layers: List[Tuple[str, Layer]] = [("stem", make_stem(config.stem, config.stem_channels, norm, rng))]
    for i, spec in enumerate(config.stages):
        downsample = not (i == 0 and config.stem is StemKind.PATCHIFY4)
        if spec.csp:
            st = CSPStage(spec, config.block, downsample, norm, config.stage_attention, rng)
        else:
            st = PlainStage(spec, config.block, downsample, norm, rng)
        layers.append((f"stage{i + 1}", st))
    layers.append(("head", make_head(config.stages[-1].ch_out, config.num_classes, config.head_norm, rng)))
    graph = LayerGraph(config, layers)
    graph.out_shape((IN_CHANNELS,) + tuple(config.input_size))
    return graph


def forward(graph: LayerGraph, x, mode: str = "eval") -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return graph(x, train=mode == "train")


def shape_trace(config: ArchConfig):
    """Symbolic (name, dims) propagation for ``config``; nothing is allocated beyond the graph."""
    return build(config, materialize=False).shape_trace()
