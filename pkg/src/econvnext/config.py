"""Architecture descriptions, presets and their JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple

from .attention import AttentionKind
from .errors import ConfigurationError


class StemKind(str, Enum):
    PATCHIFY4 = "Patchify4"
    TWO_STEP2 = "TwoStep2"
    RESNET_VC = "ResNetVC"
    STEPPED = "Stepped"


class SplitKind(str, Enum):
    TENSOR = "TensorSplit"
    CONV_PAIR = "OneByOneConvPair"


class BlockType(str, Enum):
    LNFC = "LNFC"
    BNCONV = "BNConv"


EXPANSION = 4


@dataclass
class StageSpec:
    ch_in: int
    ch_out: int
    n_blocks: int
    use_ch_mid: bool = True
    split_kind: SplitKind = SplitKind.CONV_PAIR
    csp: bool = True

    def __post_init__(self):
        self.split_kind = SplitKind(self.split_kind)

    @property
    def ch_mid(self) -> int:
        """Transition width: (ch_in + ch_out) / 2 with ch_mid enabled, else ch_out."""
        if not self.csp:
            return self.ch_out
        if self.use_ch_mid:
            if (self.ch_in + self.ch_out) % 2:
                raise ConfigurationError(f"ch_in + ch_out = {self.ch_in + self.ch_out} is odd")
            return (self.ch_in + self.ch_out) // 2
        return self.ch_out

    @property
    def branch_width(self) -> int:
        return self.ch_mid // 2 if self.csp else self.ch_out


@dataclass
class BlockKind:
    kind: BlockType = BlockType.BNCONV
    attention: AttentionKind = AttentionKind.NONE
    layer_scale_init: Optional[float] = None

    def __post_init__(self):
        self.kind = BlockType(self.kind)
        self.attention = AttentionKind(self.attention)


@dataclass
class ArchConfig:
    """Full network description.

    ``stage_attention`` adds a norm + attention gate on the concatenated
    ch_mid map of each CSP stage, ahead of the merge conv.
    ``downsample_norm`` is the norm used by every non-block conv layer.
    """

    stem: StemKind
    stages: List[StageSpec]
    block: BlockKind
    num_classes: int = 1000
    input_size: Tuple[int, int] = (224, 224)
    stage_attention: AttentionKind = AttentionKind.NONE
    downsample_norm: str = "bn"
    head_norm: bool = False
    name: str = ""
    non_paper: bool = False

    def __post_init__(self):
        self.stem = StemKind(self.stem)
        self.stage_attention = AttentionKind(self.stage_attention)
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if not isinstance(self.block, BlockKind):
            self.block = BlockKind(**self.block)
        self.input_size = tuple(self.input_size)

    @property
    def stem_channels(self) -> int:
        return self.stages[0].ch_in

    @property
    def downsample_factor(self) -> int:
        return 4 * 2 ** (len(self.stages) - 1) if self.stem is StemKind.PATCHIFY4 else 2 ** (len(self.stages) + 1)

    def validate(self) -> "ArchConfig":
        if len(self.stages) != 4:
            raise ConfigurationError(f"expected 4 stages, got {len(self.stages)}")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.downsample_norm not in ("bn", "ln"):
            raise ConfigurationError(f"downsample_norm must be 'bn' or 'ln', got {self.downsample_norm!r}")
        if self.stem in (StemKind.STEPPED, StemKind.RESNET_VC) and self.stem_channels % 2:
            raise ConfigurationError("stepped stems need an even output width")
        prev = None
        for i, s in enumerate(self.stages):
            if s.n_blocks < 1:
                raise ConfigurationError(f"stage {i + 1}: zero blocks")
            if min(s.ch_in, s.ch_out) < 1:
                raise ConfigurationError(f"stage {i + 1}: channels must be positive")
            if prev is not None and s.ch_in != prev:
                raise ConfigurationError(f"stage {i + 1}: ch_in={s.ch_in} but previous stage outputs {prev}")
            if s.csp and s.ch_mid % 2:
                raise ConfigurationError(f"stage {i + 1}: ch_mid={s.ch_mid} is odd")
            prev = s.ch_out
        h, w = self.input_size
        f = self.downsample_factor
        if h % f or w % f:
            raise ConfigurationError(f"input {h}x{w} not divisible by total stride {f}")
        return self

    # -- JSON -------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem"] = self.stem.value
        d["stage_attention"] = self.stage_attention.value
        d["input_size"] = list(self.input_size)
        d["block"] = {
            "kind": self.block.kind.value,
            "attention": self.block.attention.value,
            "layer_scale_init": self.block.layer_scale_init,
        }
        for s, src in zip(d["stages"], self.stages):
            s["split_kind"] = src.split_kind.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

TINY_CH_IN = (64, 128, 256, 512)
TINY_CH_OUT = (128, 256, 512, 1024)
TINY_BLOCKS = (3, 3, 9, 3)
CONVNEXT_T_DIMS = (96, 192, 384, 768)


def _stages(ch_in, ch_out, blocks, **kw) -> List[StageSpec]:
    return [StageSpec(a, b, n, **kw) for a, b, n in zip(ch_in, ch_out, blocks)]


def _round8(x: float) -> int:
    return max(8, int(round(x / 8.0)) * 8)


def scaled_tiny(width: float, blocks=TINY_BLOCKS, name: str = "", stem_ch: Optional[int] = None) -> ArchConfig:
    """E-ConvNeXt-tiny with every width multiplied by ``width`` and rounded to a multiple of 8."""
    ch_out = [_round8(c * width) for c in TINY_CH_OUT]
    ch_in = [stem_ch or _round8(TINY_CH_IN[0] * width)] + ch_out[:-1]
    cfg = ArchConfig(
        stem=StemKind.STEPPED,
        stages=_stages(ch_in, ch_out, blocks),
        block=BlockKind(BlockType.BNCONV, AttentionKind.ESE),
        stage_attention=AttentionKind.ESE,
        name=name or f"e_convnext_w{width:g}",
        non_paper=True,
    )
    return cfg


def _convnext_lineage(use_ch_mid: bool, split: SplitKind, name: str) -> ArchConfig:
    d = CONVNEXT_T_DIMS
    return ArchConfig(
        stem=StemKind.PATCHIFY4,
        stages=_stages((d[0],) + d[:-1], d, TINY_BLOCKS, use_ch_mid=use_ch_mid, split_kind=split),
        block=BlockKind(BlockType.LNFC, AttentionKind.NONE, 1e-6),
        downsample_norm="ln",
        head_norm=True,
        name=name,
    )


def _convnext_tiny_ref() -> ArchConfig:
    d = CONVNEXT_T_DIMS
    return ArchConfig(
        stem=StemKind.PATCHIFY4,
        stages=_stages((d[0],) + d[:-1], d, TINY_BLOCKS, csp=False, use_ch_mid=False, split_kind=SplitKind.TENSOR),
        block=BlockKind(BlockType.LNFC, AttentionKind.NONE, 1e-6),
        downsample_norm="ln",
        head_norm=True,
        name="convnext_tiny_ref",
    )


def _csp_final() -> ArchConfig:
    return ArchConfig(
        stem=StemKind.TWO_STEP2,
        stages=_stages(TINY_CH_IN, TINY_CH_OUT, TINY_BLOCKS),
        block=BlockKind(BlockType.LNFC, AttentionKind.NONE, 1e-6),
        downsample_norm="ln",
        head_norm=True,
        name="csp_final",
    )


def _e_convnext_tiny() -> ArchConfig:
    return ArchConfig(
        stem=StemKind.STEPPED,
        stages=_stages(TINY_CH_IN, TINY_CH_OUT, TINY_BLOCKS),
        block=BlockKind(BlockType.BNCONV, AttentionKind.ESE),
        stage_attention=AttentionKind.ESE,
        name="e_convnext_tiny",
    )


MINI_WIDTH, MINI_BLOCKS, MINI_STEM = 0.75, (3, 3, 9, 3), 24
SMALL_WIDTH, SMALL_BLOCKS = 1.25, (3, 3, 9, 3)

_PRESETS = {
    "convnext_tiny_ref": _convnext_tiny_ref,
    "csp_original": lambda: _convnext_lineage(False, SplitKind.TENSOR, "csp_original"),
    "csp_chmid": lambda: _convnext_lineage(True, SplitKind.CONV_PAIR, "csp_chmid"),
    "csp_final": _csp_final,
    "e_convnext_mini": lambda: scaled_tiny(MINI_WIDTH, MINI_BLOCKS, "e_convnext_mini", MINI_STEM),
    "e_convnext_tiny": _e_convnext_tiny,
    "e_convnext_small": lambda: scaled_tiny(SMALL_WIDTH, SMALL_BLOCKS, "e_convnext_small"),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ArchConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None


def narrow(config: ArchConfig, width: float = 0.125, blocks=(1, 1, 1, 1), num_classes: int = 4,
           input_size=(64, 64)) -> ArchConfig:
    """Desk-scale copy of ``config`` with widths scaled by ``width`` (kept even)."""

    def sc(c):
        return max(4, int(round(c * width / 4.0)) * 4)

    stages = [
        replace(s, ch_in=sc(s.ch_in), ch_out=sc(s.ch_out), n_blocks=n) for s, n in zip(config.stages, blocks)
    ]
    return replace(config, stages=stages, num_classes=num_classes, input_size=tuple(input_size),
                   name=f"{config.name}_narrow", non_paper=True)
