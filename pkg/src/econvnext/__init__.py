"""E-ConvNeXt construction kit: numpy execution engine, cost model and verification harness."""
from .attention import AttentionKind, attention_cost
from .builder import LayerGraph, build, forward, shape_trace
from .config import (
    PRESET_NAMES, ArchConfig, BlockKind, BlockType, SplitKind, StageSpec, StemKind, narrow, preset,
)
from .cost import CostReport, conv_flops, dwconv_flops, model_cost, param_count
from .errors import ConfigurationError, DegenerateStatisticsError, EConvNeXtError, ShapeError, TrainingError

__version__ = "0.1.0"

__all__ = [
    "AttentionKind", "attention_cost", "LayerGraph", "build", "forward", "shape_trace", "PRESET_NAMES",
    "ArchConfig", "BlockKind", "BlockType", "SplitKind", "StageSpec", "StemKind", "narrow", "preset",
    "CostReport", "conv_flops", "dwconv_flops", "model_cost", "param_count", "ConfigurationError",
    "DegenerateStatisticsError", "EConvNeXtError", "ShapeError", "TrainingError", "__version__",
]
