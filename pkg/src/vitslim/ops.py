"""Neural-network primitives built on the autodiff tensor.

Structured ops (conv2d, avgpool, cross_entropy) are fused primitives with
hand-written backward rules; normalizations and attention are composed from
arithmetic primitives so their gradients fall out of the tape.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ShapeError, SpecError
from .tensor import Tensor, no_grad

_GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


# ---- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accum(g * mask)

    return Tensor.from_op(x.data * mask, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    u = _SQRT_2_OVER_PI * (x.data + _GELU_C * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accum(g * d)

    return Tensor.from_op(out.astype(x.data.dtype), (x,), backward)


def hardswish(x: Tensor) -> Tensor:
    # x * relu6(x + 3) / 6
    r6 = np.clip(x.data + 3.0, 0.0, 6.0)
    out = x.data * r6 / 6.0

    def backward(g):
        if x.requires_grad:
            d = r6 / 6.0 + x.data * ((x.data > -3.0) & (x.data < 3.0)) / 6.0
            x._accum(g * d.astype(x.data.dtype))

    return Tensor.from_op(out.astype(x.data.dtype), (x,), backward)


_ACTIVATIONS = {"gelu": gelu, "relu": relu, "hardswish": hardswish}


def activation(kind: str, x: Tensor) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x)


# ---- convolution ---------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho = _conv_out_size(h, k, stride, pad)
    wo = _conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(gcols: np.ndarray, xshape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = xshape
    ho = _conv_out_size(h, k, stride, pad)
    wo = _conv_out_size(w, k, stride, pad)
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gc = gcols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, :, i, j]
    if pad:
        return gxp[:, :, pad : pad + h, pad : pad + w]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW layout, square odd kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d expects square kernels, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    k = kh
    b, _, h, w = x.shape
    ho, wo = _conv_out_size(h, k, stride, padding), _conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output size {ho}x{wo} is not positive for input {h}x{w}")

    cols = _im2col(x.data, k, stride, padding)  # [B, Cin*k*k, Ho*Wo]
    w2 = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gflat = g.reshape(b, cout, ho * wo)
        if weight.requires_grad:
            gw = np.einsum("boc,bic->oi", gflat, cols, optimize=True).reshape(weight.shape)
            weight._accum(gw.astype(weight.data.dtype))
        if bias is not None and bias.requires_grad:
            bias._accum(gflat.sum(axis=(0, 2)).astype(bias.data.dtype))
        if x.requires_grad:
            gcols = np.matmul(w2.T, gflat)
            x._accum(_col2im(gcols, x.shape, k, stride, padding))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out.astype(x.data.dtype), parents, backward)


# ---- pooling -------------------------------------------------------------------


def _window_sum_3x3(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((b, c, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i : i + h, j : j + w]
    return out


def _pool_counts(h: int, w: int, dtype=np.float32) -> np.ndarray:
    ones = np.ones((1, 1, h, w), dtype=dtype)
    return _window_sum_3x3(ones)[0, 0]


def avgpool3x3(x: Tensor) -> Tensor:
    """3x3 average pool, stride 1, pad 1; padding excluded from the divisor."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool3x3 expects a rank-4 input, got shape {x.shape}")
    counts = _pool_counts(x.shape[2], x.shape[3], x.data.dtype)
    out = _window_sum_3x3(x.data) / counts

    def backward(g):
        if x.requires_grad:
            # window is symmetric, so scatter == gather of the normalized grad
            x._accum(_window_sum_3x3((g / counts).astype(x.data.dtype)))

    return Tensor.from_op(out.astype(x.data.dtype), (x,), backward)


# ---- normalizations ------------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Batch normalization over (N, H, W) per channel; NCHW layout.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; inference mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects a rank-4 input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm channel mismatch: input C={c}, params C={gamma.shape}")
    gw = gamma.reshape((1, c, 1, 1))
    bw = beta.reshape((1, c, 1, 1))
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        with no_grad():
            n = x.size // c
            unbiased = var.data.reshape(c) * n / max(n - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        return xc / (var + eps).sqrt() * gw + bw
    mu = running_mean.reshape(1, c, 1, 1)
    inv = np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
    return (x - mu) / Tensor(inv) * gw + bw


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply the affine transform."""
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"layernorm dim mismatch: input last dim {c}, params {gamma.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gamma + beta


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize channel groups over (channels-in-group, H, W); NCHW layout."""
    if x.ndim != 4:
        raise ShapeError(f"groupnorm expects a rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"channel count {c} not divisible by {groups} groups")
    xg = x.reshape((b, groups, c // groups, h, w))
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
    y = xc / (var + eps).sqrt()
    return y.reshape((b, c, h, w)) * gamma.reshape((1, c, 1, 1)) + beta.reshape((1, c, 1, 1))


# ---- linear / softmax / loss ---------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., In] @ weight[In, Out] (+ bias[Out])."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood over a batch of class logits."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits._accum((g * p / n).astype(logits.data.dtype))

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# ---- attention -----------------------------------------------------------------


def mhsa(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    attn_bias: Tensor,
    heads: int,
    bq: Optional[Tensor] = None,
    bk: Optional[Tensor] = None,
    bv: Optional[Tensor] = None,
    bo: Optional[Tensor] = None,
) -> Tensor:
    """Multi-head self attention with a learned additive logit bias.

    x: [B, N, C]; wq/wk: [C, heads*d_qk]; wv: [C, heads*d_v]; wo: [heads*d_v, C];
    attn_bias: [heads, N, N]. Scaling is 1/sqrt(d_qk).
    """
    if x.ndim != 3:
        raise ShapeError(f"mhsa expects a rank-3 input, got shape {x.shape}")
    b, n, c = x.shape
    if attn_bias.shape[0] != heads or attn_bias.shape[1] != attn_bias.shape[2]:
        raise ShapeError(f"attention bias shape {attn_bias.shape} invalid for {heads} heads")
    if attn_bias.shape[1] != n:
        raise ShapeError(f"token count {n} does not match bias table size {attn_bias.shape[1]}")
    d_qk = wq.shape[1] // heads
    d_v = wv.shape[1] // heads

    def split(t: Tensor, d: int) -> Tensor:
        return linear_heads(t, b, n, heads, d)

    def linear_heads(t: Tensor, b, n, h, d) -> Tensor:
        return t.reshape((b, n, h, d)).transpose((0, 2, 1, 3))  # [B, H, N, d]

    q = split(linear(x, wq, bq), d_qk)
    k = split(linear(x, wk, bk), d_qk)
    v = split(linear(x, wv, bv), d_v)

    logits = q @ k.transpose((0, 1, 3, 2)) * (1.0 / math.sqrt(d_qk)) + attn_bias
    attn = softmax(logits, axis=-1)
    ctx = attn @ v  # [B, H, N, d_v]
    merged = ctx.transpose((0, 2, 1, 3)).reshape((b, n, heads * d_v))
    return linear(merged, wo, bo)
