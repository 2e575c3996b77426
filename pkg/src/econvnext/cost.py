"""Analytic FLOPs and parameter accounting.

One multiply-accumulate counts as one FLOP. Normalizations, activations,
pooling and elementwise ops cost 0 FLOPs; their affine parameters are counted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

Dims = Tuple[int, ...]

CONVENTION_NOTES = (
    "1 multiply-accumulate = 1 FLOP",
    "norm/activation/pooling/elementwise ops = 0 FLOPs",
    "conv bias omitted when a BatchNorm follows; convs without a norm carry bias",
)


def conv_flops(c_in: int, h_out: int, w_out: int, k: int, c_out: int) -> int:
    """Dense convolution cost, c_in * h_out * w_out * k^2 * c_out."""
    return c_in * h_out * w_out * k * k * c_out


def dwconv_flops(h_out: int, w_out: int, k: int, c_out: int) -> int:
    """Depthwise convolution cost, h_out * w_out * k^2 * c_out."""
    return h_out * w_out * k * k * c_out


@dataclass(frozen=True)
class CostRow:
    name: str
    out_dims: Dims
    flops: int
    params: int


@dataclass
class CostReport:
    rows: List[CostRow]
    input_size: Tuple[int, int] = (224, 224)
    macs2: bool = False
    non_paper_config: bool = False
    model: str = ""
    notes: Sequence[str] = field(default_factory=lambda: CONVENTION_NOTES)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows) * (2 if self.macs2 else 1)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def to_dict(self) -> dict:
        mult = 2 if self.macs2 else 1
        return {
            "model": self.model,
            "input_size": list(self.input_size),
            "convention": "2 ops per MAC" if self.macs2 else "1 op per MAC",
            "non_paper_config": self.non_paper_config,
            "notes": list(self.notes),
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "rows": [
                {"name": r.name, "out_dims": list(r.out_dims), "flops": r.flops * mult, "params": r.params}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, rows: bool = True) -> str:
        mult = 2 if self.macs2 else 1
        lines = []
        if self.model:
            lines.append(f"model: {self.model}" + ("  [non-paper config]" if self.non_paper_config else ""))
        lines += [f"# {n}" for n in self.notes]
        if self.macs2:
            lines.append("# counts doubled (2 ops per MAC)")
        if rows:
            w = max([len(r.name) for r in self.rows] + [5])
            lines.append(f"{'layer':<{w}}  {'out':>16}  {'FLOPs':>14}  {'params':>10}")
            for r in self.rows:
                dims = "x".join(str(d) for d in r.out_dims)
                lines.append(f"{r.name:<{w}}  {dims:>16}  {r.flops * mult:>14,}  {r.params:>10,}")
        lines.append(f"total FLOPs : {self.total_flops:,} ({human(self.total_flops)})")
        lines.append(f"total params: {self.total_params:,} ({human(self.total_params)})")
        return "\n".join(lines)


def human(n: float) -> str:
    """3 significant digits with a G/M/K suffix: 2040000000 -> '2.04G'."""
    for div, suf in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(n) >= div:
            return f"{n / div:.3g}{suf}"
    return f"{n:.3g}"


def param_count(layer) -> int:
    """Closed-form parameter count of a bound layer (recurses into composites)."""
    return layer.param_count()


def model_cost(graph, input_size: Optional[Tuple[int, int]] = None, macs2: bool = False) -> CostReport:
    """Full per-layer report for one image at ``input_size`` (defaults to the graph's)."""
    if graph is None:
        return CostReport(rows=[], input_size=input_size or (0, 0), macs2=macs2)
    config = getattr(graph, "config", graph)
    if input_size is None:
        input_size = tuple(config.input_size) if config is not None else (224, 224)
    if not hasattr(graph, "cost_rows"):
        from .builder import build

        config = graph
        graph = build(config, materialize=False)
    rows = graph.cost_rows((graph.in_channels,) + tuple(input_size))
    return CostReport(
        rows=rows,
        input_size=tuple(input_size),
        macs2=macs2,
        non_paper_config=bool(getattr(config, "non_paper", False)),
        model=getattr(config, "name", "") or "",
    )


def block_cost(block, c: int, h: int, w: int) -> List[CostRow]:
    """Rows of a single block bound at (c, h, w)."""
    return block.cost_rows((c, h, w), "")


# ---------------------------------------------------------------------------
# worked block arithmetic
# ---------------------------------------------------------------------------


@dataclass
class WorkedBlock:
    name: str
    terms: List[Tuple[str, int, Optional[float]]]  # (expression, computed, printed-in-text)
    printed_total: Optional[float]
    exact_total: Optional[int] = None

    @property
    def total(self) -> int:
        return sum(t[1] for t in self.terms)

    def check(self, rel_tol: float = 0.02) -> bool:
        if self.exact_total is not None:
            return self.total == self.exact_total
        return abs(self.total - self.printed_total) <= rel_tol * self.printed_total


def worked_blocks() -> List[WorkedBlock]:
    """The four 56x56 block derivations: ResNet, CSPResNet, ConvNeXt, CSP-ConvNeXt."""
    hw = 56
    return [
        WorkedBlock(
            "ResNet bottleneck 256-64-256",
            [
                ("256 x 56 x 56 x 1^2 x 64", conv_flops(256, hw, hw, 1, 64), 51.4e6),
                ("64 x 56 x 56 x 3^2 x 64", conv_flops(64, hw, hw, 3, 64), 116e6),
                ("64 x 56 x 56 x 1^2 x 256", conv_flops(64, hw, hw, 1, 256), 51.4e6),
            ],
            218.8e6,
        ),
        WorkedBlock(
            "CSPResNet bottleneck 128-64-128",
            [
                ("128 x 56 x 56 x 1^2 x 64", conv_flops(128, hw, hw, 1, 64), 25.7e6),
                ("64 x 56 x 56 x 3^2 x 64", conv_flops(64, hw, hw, 3, 64), 116e6),
                ("64 x 56 x 56 x 1^2 x 128", conv_flops(64, hw, hw, 1, 128), 25.7e6),
            ],
            167.4e6,
        ),
        WorkedBlock(
            "ConvNeXt block c=96",
            [
                ("56 x 56 x 7^2 x 96", dwconv_flops(hw, hw, 7, 96), 15e6),
                ("96 x 56 x 56 x 1^2 x 384", conv_flops(96, hw, hw, 1, 384), 116e6),
                ("384 x 56 x 56 x 1^2 x 96", conv_flops(384, hw, hw, 1, 96), 116e6),
            ],
            257e6,
        ),
        WorkedBlock(
            "CSP-ConvNeXt block c=48",
            [
                ("56 x 56 x 7^2 x 48", dwconv_flops(hw, hw, 7, 48), 7.5e6),
                ("48 x 56 x 56 x 1^2 x 192", conv_flops(48, hw, hw, 1, 192), 29.5e6),
                ("192 x 56 x 56 x 1^2 x 48", conv_flops(192, hw, hw, 1, 48), 29.5e6),
            ],
            66.5e6,
            exact_total=65_178_624,
        ),
    ]


# ---------------------------------------------------------------------------
# calibration of unpublished variants
# ---------------------------------------------------------------------------


@dataclass
class Calibration:
    width: float
    stem_channels: int
    blocks: Tuple[int, int, int, int]
    flops: int
    params: int
    error: float  # max relative deviation over (flops, params)

    def describe(self) -> str:
        return (f"width x{self.width:g}, stem {self.stem_channels}, blocks {list(self.blocks)}: "
                f"{human(self.flops)} FLOPs / {human(self.params)} params (max dev {self.error:.1%})")


def calibrate(target_flops: float, target_params: float, widths=None, stems=(16, 24, 32, 40, 48, 64, 80),
              depth_choices=((2, 3), (2, 3), (5, 6, 7, 8, 9, 10, 12), (2, 3)), top: int = 3) -> List[Calibration]:
    """Search width / stem / depth variants of the tiny layout for the closest cost match."""
    import itertools

    from .config import scaled_tiny

    widths = widths or [x / 16 for x in range(8, 25)]
    found = []
    for w in widths:
        for s in stems:
            for blocks in itertools.product(*depth_choices):
                cfg = scaled_tiny(w, blocks, stem_ch=s)
                try:
                    r = model_cost(cfg)
                except ValueError:
                    continue
                err = max(abs(r.total_flops / target_flops - 1), abs(r.total_params / target_params - 1))
                found.append(Calibration(w, s, blocks, r.total_flops, r.total_params, err))
    found.sort(key=lambda c: c.error)
    return found[:top]
