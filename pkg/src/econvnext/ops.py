"""Dense-tensor kernels with forward and reverse-mode gradients.

Every function here is pure except :func:`batchnorm_forward` in train mode,
which updates the running statistics held by its :class:`NormParams`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigurationError, DegenerateStatisticsError, ShapeError
from .tensor import ConvParams, NormKind, NormParams, as_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# ---------------------------------------------------------------------------
# multiply counting
# ---------------------------------------------------------------------------

_counter = threading.local()


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by conv and FC kernels in this thread.

    Yields a one-element list whose entry holds the running total. The count is
    taken from the operand shapes of the contractions actually performed.
    """
    box = [0]
    prev = getattr(_counter, "box", None)
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev


def _tally(n: int) -> None:
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += int(n)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_geometry(x: np.ndarray, p: ConvParams) -> Tuple[int, int, int]:
    n, c, h, w = x.shape
    if c % p.groups or c // p.groups != p.weight.shape[1]:
        raise ConfigurationError(
            f"input has {c} channels but weight expects {p.weight.shape[1]} per group x {p.groups} groups"
        )
    k, s, pad = p.kernel, p.stride, p.pad
    ho = (h + 2 * pad - k) // s + 1
    wo = (w + 2 * pad - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv k={k} s={s} pad={pad} on {h}x{w} gives empty output")
    return pad, ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, p: ConvParams) -> np.ndarray:
    """Cross-correlation of ``x`` (n, c_in, h, w) with ``p.weight``."""
    x = as_tensor(x)
    pad, ho, wo = _conv_geometry(x, p)
    n = x.shape[0]
    k, s, g = p.kernel, p.stride, p.groups
    w = p.weight
    xp = _pad(x, pad)
    span_h, span_w = s * (ho - 1) + 1, s * (wo - 1) + 1

    if p.depthwise:
        y = np.zeros((n, p.c_out, ho, wo), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                y += xp[:, :, i:i + span_h:s, j:j + span_w:s] * w[None, :, 0, i, j, None, None]
        _tally(n * p.c_out * ho * wo * k * k)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cpg, cog = w.shape[1], p.c_out // g
        parts = []
        for gi in range(g):
            cg = cols[:, gi * cpg:(gi + 1) * cpg]
            wg = w[gi * cog:(gi + 1) * cog]
            # (n, cpg, ho, wo, k, k) . (cog, cpg, k, k) -> (n, ho, wo, cog)
            parts.append(np.tensordot(cg, wg, axes=([1, 4, 5], [1, 2, 3])))
            _tally(n * ho * wo * cog * cpg * k * k)
        y = np.concatenate(parts, axis=3) if g > 1 else parts[0]
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y


def conv2d_backward(x, p: ConvParams, grad_out) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Return ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None when unbiased."""
    x = as_tensor(x)
    pad, ho, wo = _conv_geometry(x, p)
    n, c, h, w_ = x.shape
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, p.c_out, ho, wo):
        raise ShapeError(f"grad_out {grad_out.shape} != forward output {(n, p.c_out, ho, wo)}")
    k, s, g = p.kernel, p.stride, p.groups
    w = p.weight
    xp = _pad(x, pad)
    span_h, span_w = s * (ho - 1) + 1, s * (wo - 1) + 1
    gxp = np.zeros_like(xp, dtype=np.result_type(x, w, grad_out))
    gw = np.zeros_like(w, dtype=gxp.dtype)

    if p.depthwise:
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i:i + span_h:s, j:j + span_w:s]
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, win)
                gxp[:, :, i:i + span_h:s, j:j + span_w:s] += grad_out * w[None, :, 0, i, j, None, None]
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cpg, cog = w.shape[1], p.c_out // g
        for gi in range(g):
            go = grad_out[:, gi * cog:(gi + 1) * cog]
            cg = cols[:, gi * cpg:(gi + 1) * cpg]
            gw[gi * cog:(gi + 1) * cog] = np.tensordot(go, cg, axes=([0, 2, 3], [0, 2, 3]))
            # (n, cog, ho, wo) . (cog, cpg, k, k) -> (n, ho, wo, cpg, k, k)
            gcols = np.tensordot(go, w[gi * cog:(gi + 1) * cog], axes=([1], [0]))
            sl = slice(gi * cpg, (gi + 1) * cpg)
            for i in range(k):
                for j in range(k):
                    gxp[:, sl, i:i + span_h:s, j:j + span_w:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + w_] if pad else gxp
    gb = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _check_affine(x: np.ndarray, p: NormParams) -> None:
    if len(p.gamma) != x.shape[1] or len(p.beta) != x.shape[1]:
        raise ConfigurationError(f"norm affine has {len(p.gamma)} channels, input has {x.shape[1]}")


def _bn_stats(x: np.ndarray, p: NormParams):
    if p.mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 1:
            raise DegenerateStatisticsError("BatchNorm train mode needs n*h*w > 1")
        return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)), m
    return np.asarray(p.running_mean), np.asarray(p.running_var), None


def batchnorm_forward(x, p: NormParams) -> np.ndarray:
    """Per-channel normalization over (n, h, w); train mode updates running stats."""
    x = as_tensor(x)
    if p.kind is not NormKind.BATCH:
        raise ConfigurationError(f"batchnorm_forward got {p.kind.value}")
    _check_affine(x, p)
    mean, var, m = _bn_stats(x, p)
    if m is not None:
        mom = p.momentum
        p.running_mean *= 1 - mom
        p.running_mean += mom * mean
        p.running_var *= 1 - mom
        p.running_var += mom * var * m / (m - 1)
    inv = 1.0 / np.sqrt(var + p.eps)
    scale = (p.gamma * inv)[None, :, None, None]
    return (x - mean[None, :, None, None]) * scale + p.beta[None, :, None, None]


def batchnorm_backward(x, p: NormParams, grad_out):
    """Gradients for the mode ``p`` was in during forward (stats recomputed from ``x``)."""
    x = as_tensor(x)
    g = np.asarray(grad_out)
    if g.shape != x.shape:
        raise ShapeError("grad_out must match input shape")
    mean, var, m = _bn_stats(x, p)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    if m is None:
        gx = g * (p.gamma * inv)[None, :, None, None]
    else:
        gx = (p.gamma * inv / m)[None, :, None, None] * (
            m * g - gbeta[None, :, None, None] - xhat * ggamma[None, :, None, None]
        )
    return gx, ggamma, gbeta


def _ln_last(x: np.ndarray, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layernorm_forward(x, p: NormParams) -> np.ndarray:
    """Normalize each (n, h, w) position across its channels.

    Channel-last runs on a transposed copy; both kinds compute the same function.
    """
    x = as_tensor(x)
    if p.kind is NormKind.BATCH:
        raise ConfigurationError("layernorm_forward got BatchNorm params")
    _check_affine(x, p)
    if p.kind is NormKind.LN_LAST:
        y = _ln_last(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), p.gamma, p.beta, p.eps)
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + p.eps)
    return xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]


def layernorm_backward(x, p: NormParams, grad_out):
    x = as_tensor(x)
    g = np.asarray(grad_out)
    if g.shape != x.shape:
        raise ShapeError("grad_out must match input shape")
    c = x.shape[1]
    mean = x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=1, keepdims=True) + p.eps)
    xhat = (x - mean) * inv
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    gxhat = g * p.gamma[None, :, None, None]
    gx = inv / c * (c * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# activations and elementwise
# ---------------------------------------------------------------------------


def gelu(x) -> np.ndarray:
    """Exact GELU, x * Phi(x) via erf."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x, grad_out) -> np.ndarray:
    return grad_out * (np.asarray(x) > 0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(x, grad_out) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


def hard_sigmoid(x) -> np.ndarray:
    """clamp((x + 3) / 6, 0, 1)."""
    return np.clip((np.asarray(x) + 3.0) / 6.0, 0.0, 1.0)


def hard_sigmoid_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    return grad_out * ((x > -3.0) & (x < 3.0)) / 6.0


def add(a, b) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"add: {np.shape(a)} vs {np.shape(b)}")
    return np.asarray(a) + np.asarray(b)


def add_backward(grad_out):
    return grad_out, grad_out


def concat_channels(a, b) -> np.ndarray:
    a, b = as_tensor(a, "a"), as_tensor(b, "b")
    if (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeError(f"concat: {a.shape} vs {b.shape} differ outside the channel axis")
    return np.concatenate([a, b], axis=1)


def split_channels(x, c_first: int) -> Tuple[np.ndarray, np.ndarray]:
    x = as_tensor(x)
    if not 1 <= c_first < x.shape[1]:
        raise ShapeError(f"split point {c_first} outside [1, {x.shape[1]})")
    return x[:, :c_first], x[:, c_first:]


# ---------------------------------------------------------------------------
# pooling and classifier
# ---------------------------------------------------------------------------


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(np.asarray(grad_out) / (h * w), x_shape).copy()


def fully_connected(x_flat, weight, bias=None) -> np.ndarray:
    """Affine map ``x @ weight.T + bias`` for ``weight`` of shape (out, in).

    ``x_flat`` may be a vector or a (n, in) batch.
    """
    x_flat = np.asarray(x_flat)
    weight = np.asarray(weight)
    if x_flat.shape[-1] != weight.shape[1]:
        raise ShapeError(f"FC input width {x_flat.shape[-1]} != weight input width {weight.shape[1]}")
    y = x_flat @ weight.T
    _tally((x_flat.size // x_flat.shape[-1]) * weight.size)
    if bias is not None:
        y = y + bias
    return y


def fully_connected_backward(x_flat, weight, grad_out):
    x_flat = np.asarray(x_flat)
    g = np.asarray(grad_out)
    gx = g @ weight
    x2 = x_flat.reshape(-1, x_flat.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return gx, g2.T @ x2, g2.sum(axis=0)
