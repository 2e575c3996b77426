"""Value types: rank-4 tensors, trainable parameters and per-op parameter bundles.

A ``TensorF`` is a plain ``numpy.ndarray`` of rank 4 laid out as (n, c, h, w).
Gradients live on :class:`Parameter` objects rather than on activations.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ShapeError

DEFAULT_DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6


def as_tensor(x, name: str = "x") -> np.ndarray:
    """Validate and return ``x`` as a rank-4 floating array."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dims must be >= 1, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DEFAULT_DTYPE)
    return x


class Parameter:
    """Trainable array with an accumulated gradient buffer."""

    __slots__ = ("data", "_grad", "requires_grad", "decay")

    def __init__(self, data, requires_grad: bool = True, decay: Optional[bool] = None):
        self.data = np.asarray(data, dtype=np.result_type(data, np.float32))
        self._grad = None
        self.requires_grad = requires_grad
        # weight decay on matrices/kernels only, never on norm affines or biases
        self.decay = self.data.ndim > 1 if decay is None else decay

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros(self.data.shape, dtype=self.data.dtype)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate(self, g) -> None:
        if self.requires_grad:
            self.grad += g

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    ``weight`` has shape (c_out, c_in // groups, k, k). ``padding=None`` selects
    the default rule from :func:`conv_padding`.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    groups: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ConfigurationError(f"conv weight must be (c_out, c_in/g, k, k), got {w.shape}")
        if w.shape[2] < 1 or self.stride < 1 or self.groups < 1:
            raise ConfigurationError("kernel, stride and groups must be >= 1")
        if w.shape[0] % self.groups:
            raise ConfigurationError(f"c_out={w.shape[0]} not divisible by groups={self.groups}")
        if self.bias is not None and np.shape(self.bias) != (w.shape[0],):
            raise ConfigurationError(f"bias must have length {w.shape[0]}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def pad(self) -> int:
        return conv_padding(self.kernel, self.stride) if self.padding is None else self.padding

    @property
    def depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out and self.weight.shape[1] == 1


def conv_padding(k: int, stride: int) -> int:
    """Patchify kernels (2x2/s2, 4x4/s4) tile exactly; odd kernels pad to keep size."""
    if k in (2, 4) and stride == k:
        return 0
    return k // 2


class NormKind(str, Enum):
    BATCH = "BatchNorm"
    LN_FIRST = "LayerNormChFirst"
    LN_LAST = "LayerNormChLast"


@dataclass
class NormParams:
    """Affine and running statistics of a normalization layer.

    The arrays are held by reference, so a layer can hand out views of its own
    parameters and see running-stat updates in place.
    """

    kind: NormKind
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    def __post_init__(self):
        self.kind = NormKind(self.kind)
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.kind is NormKind.BATCH:
            c = len(self.gamma)
            if self.running_mean is None:
                self.running_mean = np.zeros(c)
            if self.running_var is None:
                self.running_var = np.ones(c)
            if not 0 < self.momentum < 1:
                raise ConfigurationError("momentum must lie in (0, 1)")
            if np.any(np.asarray(self.running_var) < 0):
                raise ConfigurationError("running_var entries must be >= 0")

    @classmethod
    def batchnorm(cls, c: int, **kw) -> "NormParams":
        return cls(NormKind.BATCH, np.ones(c), np.zeros(c), **kw)

    @classmethod
    def layernorm(cls, c: int, channels_last: bool = False, eps: float = LN_EPS) -> "NormParams":
        kind = NormKind.LN_LAST if channels_last else NormKind.LN_FIRST
        return cls(kind, np.ones(c), np.zeros(c), eps=eps)
