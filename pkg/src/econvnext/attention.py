"""Channel attention: SE-style, EfficientNet-style and ESE gates.

All three compute ``x * gate(x)`` with a per-(n, c) gate in [0, 1]
broadcast over the spatial positions.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import ops
from .cost import CostRow
from .errors import ConfigurationError, ShapeError
from .layers import Layer, _rng, trunc_normal
from .tensor import Parameter

SE_REDUCTION = 4


class AttentionKind(str, Enum):
    NONE = "None"
    SE = "SEStyle"
    EFF = "EffStyle"
    ESE = "ESE"


class _Gate(Layer):
    """Shared squeeze / gate / broadcast-multiply plumbing."""

    c: int

    def _logits(self, s):
        raise NotImplementedError

    def _logits_backward(self, cache, g):
        raise NotImplementedError

    def gate(self, x) -> np.ndarray:
        """Gate values of shape (n, c) for input ``x``."""
        s = ops.global_avg_pool(x)[:, :, 0, 0]
        z, _ = self._logits(s)
        return self._squash(z)

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1] != self.c:
            raise ShapeError(f"attention over {self.c} channels got input {x.shape}")
        s = ops.global_avg_pool(x)[:, :, 0, 0]
        z, zc = self._logits(s)
        gate = self._squash(z)
        return x * gate[:, :, None, None], (x, z, zc, gate)

    def backward(self, cache, grad):
        x, z, zc, gate = cache
        gx = grad * gate[:, :, None, None]
        ggate = (grad * x).sum(axis=(2, 3))
        gz = self._squash_backward(z, ggate)
        gs = self._logits_backward(zc, gz)
        return gx + ops.global_avg_pool_backward(x.shape, gs[:, :, None, None])

    def cost_rows(self, shape, prefix=""):
        return [CostRow(prefix, shape, self.gate_flops(), self.param_count())]


class ESE(_Gate):
    """GAP -> single c->c 1x1 conv (with bias) -> hard sigmoid."""

    kind = AttentionKind.ESE

    def __init__(self, c, rng=None):
        self.c = c
        self.weight = Parameter(trunc_normal(_rng(rng), (c, c, 1, 1)))
        self.bias = Parameter(np.zeros(c))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def _logits(self, s):
        return ops.fully_connected(s, self.weight.data[:, :, 0, 0], self.bias.data), s

    def _logits_backward(self, s, gz):
        gs, gw, gb = ops.fully_connected_backward(s, self.weight.data[:, :, 0, 0], gz)
        self.weight.accumulate(gw[:, :, None, None])
        self.bias.accumulate(gb)
        return gs

    _squash = staticmethod(ops.hard_sigmoid)
    _squash_backward = staticmethod(ops.hard_sigmoid_backward)

    def param_count(self):
        return self.c * self.c + self.c

    def gate_flops(self):
        return self.c * self.c


class SqueezeExcite(_Gate):
    """GAP -> FC c->hidden -> ReLU -> FC hidden->c -> sigmoid."""

    def __init__(self, c, hidden, rng=None, kind=AttentionKind.SE):
        if hidden < 1:
            raise ConfigurationError(f"squeeze width {hidden} < 1 for c={c}")
        rng = _rng(rng)
        self.c, self.hidden, self.kind = c, hidden, kind
        self.w1 = Parameter(trunc_normal(rng, (hidden, c)))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(trunc_normal(rng, (c, hidden)))
        self.b2 = Parameter(np.zeros(c))

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _logits(self, s):
        a = ops.fully_connected(s, self.w1.data, self.b1.data)
        r = ops.relu(a)
        return ops.fully_connected(r, self.w2.data, self.b2.data), (s, a, r)

    def _logits_backward(self, cache, gz):
        s, a, r = cache
        gr, gw2, gb2 = ops.fully_connected_backward(r, self.w2.data, gz)
        ga = ops.relu_backward(a, gr)
        gs, gw1, gb1 = ops.fully_connected_backward(s, self.w1.data, ga)
        self.w1.accumulate(gw1)
        self.b1.accumulate(gb1)
        self.w2.accumulate(gw2)
        self.b2.accumulate(gb2)
        return gs

    _squash = staticmethod(ops.sigmoid)
    _squash_backward = staticmethod(ops.sigmoid_backward)

    def param_count(self):
        return 2 * self.c * self.hidden + self.hidden + self.c

    def gate_flops(self):
        return 2 * self.c * self.hidden


def make_attention(kind, c: int, r: int = SE_REDUCTION, rng=None) -> Optional[Layer]:
    """Attention layer for a block of base width ``c``.

    EffStyle sits on the 4c expanded width with a 4c/r bottleneck, so the
    returned module gates ``4 * c`` channels.
    """
    kind = AttentionKind(kind)
    if kind is AttentionKind.NONE:
        return None
    if kind is AttentionKind.ESE:
        return ESE(c, rng=rng)
    if kind is AttentionKind.SE:
        return SqueezeExcite(c, c // r, rng=rng, kind=kind)
    return SqueezeExcite(4 * c, (4 * c) // r, rng=rng, kind=kind)


@dataclass(frozen=True)
class AttentionCost:
    flops: int
    params: int


def attention_cost(kind, c: int, r: int = SE_REDUCTION) -> AttentionCost:
    """Per-sample gate FLOPs and parameters; independent of the spatial size."""
    if c < 1:
        raise ConfigurationError("c must be >= 1")
    kind = AttentionKind(kind)
    if kind is AttentionKind.NONE:
        return AttentionCost(0, 0)
    if kind is AttentionKind.ESE:
        return AttentionCost(c * c, c * c + c)
    width = c if kind is AttentionKind.SE else 4 * c
    hidden = width // r
    if hidden < 1:
        raise ConfigurationError(f"c/r < 1 for c={c}, r={r}")
    return AttentionCost(2 * width * hidden, 2 * width * hidden + hidden + width)
