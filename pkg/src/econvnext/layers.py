"""Layer objects: parameter holders with forward/backward, shape and cost rules.

``forward(x, train)`` returns ``(y, cache)``; ``backward(cache, grad_y)``
accumulates parameter gradients and returns the input gradient. Caches are
returned rather than stored, so eval-mode forwards on a frozen model can run
concurrently.
"""
from __future__ import annotations

import contextlib
import threading

from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import ops
from .cost import CostRow, conv_flops, dwconv_flops
from .errors import ConfigurationError, ShapeError
from .tensor import BN_EPS, BN_MOMENTUM, LN_EPS, ConvParams, NormKind, NormParams, Parameter, conv_padding

Shape = Tuple[int, ...]

INIT_STD = 0.02


_symbolic = threading.local()


@contextlib.contextmanager
def symbolic():
    """Build layers with zero-memory placeholder weights (shape and cost queries only)."""
    prev = getattr(_symbolic, "on", False)
    _symbolic.on = True
    try:
        yield
    finally:
        _symbolic.on = prev


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    if getattr(_symbolic, "on", False):
        return np.broadcast_to(np.float64(0.0), shape)
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Layer:
    """Base class. Leaves override the compute methods; composites use children."""

    def parameters(self) -> Dict[str, Parameter]:
        return {}

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for k, p in self.parameters().items():
            yield prefix + k, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)[0]

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, cache, grad):
        raise NotImplementedError

    def out_shape(self, shape: Shape) -> Shape:
        return shape

    def param_count(self) -> int:
        return sum(c.param_count() for _, c in self.children())

    def cost_rows(self, shape: Shape, prefix: str = "") -> List[CostRow]:
        rows = []
        for name, child in self.children():
            rows += child.cost_rows(shape, _join(prefix, name))
            shape = child.out_shape(shape)
        return rows

    def trace(self, shape: Shape, prefix: str = "") -> List[Tuple[str, Shape]]:
        kids = self.children()
        if not kids:
            return [(prefix, self.out_shape(shape))]
        out = []
        for name, child in kids:
            out += child.trace(shape, _join(prefix, name))
            shape = child.out_shape(shape)
        return out

    def _row(self, shape: Shape, prefix: str, flops: int) -> List[CostRow]:
        return [CostRow(prefix, self.out_shape(shape), flops, self.param_count())]


class Sequential(Layer):
    def __init__(self, layers: Sequence[Tuple[str, Layer]]):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def __getitem__(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def forward(self, x, train=False):
        caches = []
        for _, layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, caches

    def backward(self, cache, grad):
        for (_, layer), c in zip(reversed(self.layers), reversed(cache)):
            grad = layer.backward(c, grad)
        return grad

    def out_shape(self, shape):
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def cost_rows(self, shape, prefix=""):
        rows = []
        for name, layer in self.layers:
            rows += layer.cost_rows(shape, _join(prefix, name))
            shape = layer.out_shape(shape)
        return rows


# ---------------------------------------------------------------------------
# leaves
# ---------------------------------------------------------------------------


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, stride=1, groups=1, bias=True, padding=None, rng=None):
        if c_in % groups or c_out % groups:
            raise ConfigurationError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
        self.c_in, self.c_out, self.k, self.stride, self.groups = c_in, c_out, k, stride, groups
        self.padding = padding
        rng = _rng(rng)
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in // groups, k, k)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    @property
    def pad(self) -> int:
        return conv_padding(self.k, self.stride) if self.padding is None else self.padding

    @property
    def depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out

    def conv_params(self) -> ConvParams:
        return ConvParams(
            self.weight.data,
            None if self.bias is None else self.bias.data,
            self.stride,
            self.groups,
            self.padding,
        )

    def parameters(self):
        d = {"weight": self.weight}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def forward(self, x, train=False):
        return ops.conv2d_forward(x, self.conv_params()), x

    def backward(self, cache, grad):
        gx, gw, gb = ops.conv2d_backward(cache, self.conv_params(), grad)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} input channels, got {c}")
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv k={self.k} s={self.stride} empties a {h}x{w} map")
        return (self.c_out, ho, wo)

    def param_count(self):
        return self.k * self.k * (self.c_in // self.groups) * self.c_out + (self.c_out if self.bias is not None else 0)

    def flops(self, shape) -> int:
        _, ho, wo = self.out_shape(shape)
        if self.depthwise:
            return dwconv_flops(ho, wo, self.k, self.c_out)
        return conv_flops(self.c_in // self.groups, ho, wo, self.k, self.c_out)

    def cost_rows(self, shape, prefix=""):
        return self._row(shape, prefix, self.flops(shape))


class BatchNorm2d(Layer):
    def __init__(self, c, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.c, self.eps, self.momentum = c, eps, momentum
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def norm_params(self, train: bool) -> NormParams:
        return NormParams(
            NormKind.BATCH, self.gamma.data, self.beta.data, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, mode="train" if train else "eval",
        )

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x, train=False):
        return ops.batchnorm_forward(x, self.norm_params(train)), (x, train)

    def backward(self, cache, grad):
        x, train = cache
        gx, gg, gb = ops.batchnorm_backward(x, self.norm_params(train), grad)
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        return gx

    def out_shape(self, shape):
        if shape[0] != self.c:
            raise ShapeError(f"norm over {self.c} channels got {shape[0]}")
        return shape

    def param_count(self):
        return 2 * self.c

    def cost_rows(self, shape, prefix=""):
        return self._row(shape, prefix, 0)


class LayerNorm2d(BatchNorm2d):
    """Per-position channel LayerNorm; ``channels_last`` selects the transposed kernel."""

    def __init__(self, c, channels_last=False, eps=LN_EPS):
        self.c, self.eps, self.channels_last = c, eps, channels_last
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))

    def norm_params(self, train=False):
        kind = NormKind.LN_LAST if self.channels_last else NormKind.LN_FIRST
        return NormParams(kind, self.gamma.data, self.beta.data, eps=self.eps)

    def named_buffers(self, prefix=""):
        return iter(())

    def forward(self, x, train=False):
        return ops.layernorm_forward(x, self.norm_params()), x

    def backward(self, cache, grad):
        gx, gg, gb = ops.layernorm_backward(cache, self.norm_params(), grad)
        self.gamma.accumulate(gg)
        self.beta.accumulate(gb)
        return gx


_ACTS = {
    "gelu": (ops.gelu, ops.gelu_backward),
    "relu": (ops.relu, ops.relu_backward),
    "sigmoid": (ops.sigmoid, ops.sigmoid_backward),
    "hard_sigmoid": (ops.hard_sigmoid, ops.hard_sigmoid_backward),
}


class Activation(Layer):
    def __init__(self, kind="gelu"):
        if kind not in _ACTS:
            raise ConfigurationError(f"unknown activation {kind!r}")
        self.kind = kind
        self._f, self._b = _ACTS[kind]

    def forward(self, x, train=False):
        return self._f(x), x

    def backward(self, cache, grad):
        return self._b(cache, grad)

    def cost_rows(self, shape, prefix=""):
        return []


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        return ops.global_avg_pool(x), np.shape(x)

    def backward(self, cache, grad):
        return ops.global_avg_pool_backward(cache, grad)

    def out_shape(self, shape):
        return (shape[0], 1, 1)

    def cost_rows(self, shape, prefix=""):
        return []


class Flatten(Layer):
    """(n, c, 1, 1) -> (n, c)."""

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.shape[2:] != (1, 1):
            raise ShapeError(f"flatten expects pooled (n, c, 1, 1), got {x.shape}")
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache)

    def out_shape(self, shape):
        return (shape[0],)

    def cost_rows(self, shape, prefix=""):
        return []


class Linear(Layer):
    """Fully connected layer on (n, in) rows; weight is (out, in)."""

    def __init__(self, c_in, c_out, bias=True, rng=None):
        self.c_in, self.c_out = c_in, c_out
        self.weight = Parameter(trunc_normal(_rng(rng), (c_out, c_in)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def parameters(self):
        d = {"weight": self.weight}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def forward(self, x, train=False):
        return ops.fully_connected(x, self.weight.data, None if self.bias is None else self.bias.data), x

    def backward(self, cache, grad):
        gx, gw, gb = ops.fully_connected_backward(cache, self.weight.data, grad)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx

    def out_shape(self, shape):
        if shape[-1] != self.c_in:
            raise ShapeError(f"linear expects width {self.c_in}, got {shape[-1]}")
        return shape[:-1] + (self.c_out,)

    def param_count(self):
        return self.c_in * self.c_out + (self.c_out if self.bias is not None else 0)

    def cost_rows(self, shape, prefix=""):
        positions = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
        return self._row(shape, prefix, positions * self.c_in * self.c_out)


class ChannelsLastLinear(Linear):
    """FC applied at every spatial position of an (n, c, h, w) map via a channel-last view."""

    def forward(self, x, train=False):
        xl = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
        y, _ = super().forward(xl, train)
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), xl

    def backward(self, cache, grad):
        gl = np.ascontiguousarray(grad.transpose(0, 2, 3, 1))
        gx = super().backward(cache, gl)
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"linear expects width {self.c_in}, got {c}")
        return (self.c_out, h, w)

    def cost_rows(self, shape, prefix=""):
        _, h, w = shape
        return self._row(shape, prefix, conv_flops(self.c_in, h, w, 1, self.c_out))


class LayerScale(Layer):
    def __init__(self, c, init=1e-6):
        self.c = c
        self.gamma = Parameter(np.full(c, float(init)))

    def parameters(self):
        return {"gamma": self.gamma}

    def forward(self, x, train=False):
        return x * self.gamma.data[None, :, None, None], x

    def backward(self, cache, grad):
        self.gamma.accumulate((grad * cache).sum(axis=(0, 2, 3)))
        return grad * self.gamma.data[None, :, None, None]

    def param_count(self):
        return self.c

    def cost_rows(self, shape, prefix=""):
        return self._row(shape, prefix, 0)


class Identity(Layer):
    def forward(self, x, train=False):
        return x, None

    def backward(self, cache, grad):
        return grad

    def cost_rows(self, shape, prefix=""):
        return []


def conv_norm_act(c_in, c_out, k, stride=1, norm="bn", act="gelu", rng=None) -> Sequential:
    """Conv followed by an optional norm and activation; bias only when no norm follows."""
    layers = [("conv", Conv2d(c_in, c_out, k, stride, bias=norm is None, rng=rng))]
    if norm == "bn":
        layers.append(("norm", BatchNorm2d(c_out)))
    elif norm == "ln":
        layers.append(("norm", LayerNorm2d(c_out)))
    elif norm is not None:
        raise ConfigurationError(f"unknown norm {norm!r}")
    if act is not None:
        layers.append(("act", Activation(act)))
    return Sequential(layers)
