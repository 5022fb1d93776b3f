"""Parameterized network blocks: conv stem, 4D pool-mixer block, 3D attention
block, downsampling embeddings, classifier head, and CONV-BN folding.

Layout convention: 4D features are NCHW, 3D features are [B, tokens, C].
Every module exposes ``named_tensors(prefix)`` yielding
``(name, tensor, trainable)`` triples; running BN statistics are serialized
but reported as non-trainable.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor

NamedTensor = Tuple[str, Tensor, bool]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled into [-2std, 2std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class Module:
    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        raise NotImplementedError

    def params(self):
        return [t for _, t, trainable in self.named_tensors() if trainable]

    def load_state(self, state: dict) -> None:
        for name, t, _ in self.named_tensors():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in checkpoint state")
            src = state[name]
            if tuple(src.shape) != t.shape:
                raise ShapeError(f"tensor {name!r}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data[...] = src

    def state(self) -> dict:
        return {name: t.data for name, t, _ in self.named_tensors()}


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, *,
                 rng: np.random.Generator, bias: bool = True):
        # Kaiming fan-out normal
        std = math.sqrt(2.0 / (cout * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield prefix + "weight", self.weight, True
        if self.bias is not None:
            yield prefix + "bias", self.bias, True


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.eps, self.momentum, training)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield prefix + "gamma", self.gamma, True
        yield prefix + "beta", self.beta, True
        yield prefix + "running_mean", Tensor(self.running_mean), False
        yield prefix + "running_var", Tensor(self.running_var), False


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield prefix + "gamma", self.gamma, True
        yield prefix + "beta", self.beta, True


class Linear(Module):
    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(trunc_normal(rng, (cin, cout)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield prefix + "weight", self.weight, True
        if self.bias is not None:
            yield prefix + "bias", self.bias, True


def fold_bn_into_conv(conv: Conv2d, bn: BatchNorm2d, *, rng: Optional[np.random.Generator] = None) -> Conv2d:
    """Return a conv equivalent to ``bn(conv(x), training=False)`` for all x."""
    cout = conv.weight.shape[0]
    if bn.gamma.shape[0] != cout:
        raise ShapeError(f"BN channels {bn.gamma.shape[0]} != conv output channels {cout}")
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    folded = Conv2d(conv.weight.shape[1], cout, conv.weight.shape[2],
                    conv.stride, conv.padding, rng=rng or np.random.default_rng(0))
    folded.weight.data[...] = conv.weight.data * scale.reshape(cout, 1, 1, 1)
    b = conv.bias.data if conv.bias is not None else 0.0
    folded.bias.data[...] = (b - bn.running_mean) * scale + bn.beta.data
    return folded


class ConvBn(Module):
    """Conv followed by BN, with optional GeLU; foldable for inference."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, *,
                 act: Optional[str] = None, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, k, stride, padding, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = act
        self._folded: Optional[Conv2d] = None

    def fold(self) -> None:
        self._folded = fold_bn_into_conv(self.conv, self.bn)

    def unfold(self) -> None:
        self._folded = None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if self._folded is not None and not training:
            y = self._folded(x)
        else:
            y = self.bn(self.conv(x), training)
        return ops.activation(self.act, y) if self.act else y

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.conv.named_tensors(prefix + "conv.")
        yield from self.bn.named_tensors(prefix + "bn.")


class Stem(Module):
    """Patch embedding: two 3x3 stride-2 convs, each with BN + GeLU (4x downsample)."""

    def __init__(self, mid: int, out: int, *, rng: np.random.Generator, in_ch: int = 3):
        self.conv1 = ConvBn(in_ch, mid, 3, 2, 1, act="gelu", rng=rng)
        self.conv2 = ConvBn(mid, out, 3, 2, 1, act="gelu", rng=rng)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"stem needs H, W divisible by 4, got {x.shape[2]}x{x.shape[3]}")
        return self.conv2(self.conv1(x, training), training)

    def fold(self) -> None:
        self.conv1.fold()
        self.conv2.fold()

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.conv1.named_tensors(prefix + "conv1.")
        yield from self.conv2.named_tensors(prefix + "conv2.")


class Downsample(Module):
    """Between-stage embedding: 3x3 stride-2 conv + BN."""

    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator):
        self.conv = ConvBn(cin, cout, 3, 2, 1, rng=rng)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.conv(x, training)

    def fold(self) -> None:
        self.conv.fold()

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.conv.named_tensors(prefix + "conv.")


class Mb4d(Module):
    """4D MetaBlock: pool-mixer residual, then 1x1-conv MLP residual.

    I = Pool(x) + x; out = ConvB(ConvBG(I)) + I. No normalization sits in
    front of the pool mixer.
    """

    def __init__(self, width: int, exp: int = 4, *, rng: np.random.Generator):
        hidden = width * exp
        self.width = width
        self.exp = exp
        self.fc1 = ConvBn(width, hidden, 1, act="gelu", rng=rng)
        self.fc2 = ConvBn(hidden, width, 1, rng=rng)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"4D block expects a rank-4 input, got shape {x.shape}")
        if x.shape[1] != self.width:
            raise ShapeError(f"width mismatch: input {x.shape[1]} channels, block expects {self.width}")
        mixed = ops.avgpool3x3(x) + x
        return self.fc2(self.fc1(mixed, training), training) + mixed

    def fold(self) -> None:
        self.fc1.fold()
        self.fc2.fold()

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.fc1.named_tensors(prefix + "fc1.")
        yield from self.fc2.named_tensors(prefix + "fc2.")


class Attention(Module):
    def __init__(self, c: int, heads: int, d_qk: int, d_v: int, n_tokens: int, *,
                 rng: np.random.Generator):
        self.heads = heads
        self.wq = Linear(c, heads * d_qk, rng=rng)
        self.wk = Linear(c, heads * d_qk, rng=rng)
        self.wv = Linear(c, heads * d_v, rng=rng)
        self.wo = Linear(heads * d_v, c, rng=rng)
        self.attn_bias = Tensor(trunc_normal(rng, (heads, n_tokens, n_tokens)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mhsa(x, self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight,
                        self.attn_bias, self.heads,
                        bq=self.wq.bias, bk=self.wk.bias, bv=self.wv.bias, bo=self.wo.bias)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.wq.named_tensors(prefix + "wq.")
        yield from self.wk.named_tensors(prefix + "wk.")
        yield from self.wv.named_tensors(prefix + "wv.")
        yield from self.wo.named_tensors(prefix + "wo.")
        yield prefix + "attn_bias", self.attn_bias, True


class Mb3d(Module):
    """3D MetaBlock: LN -> MHSA residual, then LN -> Linear MLP residual."""

    def __init__(self, width: int, heads: int = 8, d_qk: int = 32, d_v: int = 128,
                 exp: int = 4, n_tokens: int = 49, *, rng: np.random.Generator):
        self.width = width
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads, d_qk, d_v, n_tokens, rng=rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, width * exp, rng=rng)
        self.fc2 = Linear(width * exp, width, rng=rng)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"3D block expects a rank-3 input, got shape {x.shape}")
        if x.shape[2] != self.width:
            raise ShapeError(f"width mismatch: input {x.shape[2]} channels, block expects {self.width}")
        x = self.attn(self.norm1(x)) + x
        return self.fc2(ops.gelu(self.fc1(self.norm2(x)))) + x

    def fold(self) -> None:  # LN has nothing to fold
        pass

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.norm1.named_tensors(prefix + "norm1.")
        yield from self.attn.named_tensors(prefix + "attn.")
        yield from self.norm2.named_tensors(prefix + "norm2.")
        yield from self.fc1.named_tensors(prefix + "fc1.")
        yield from self.fc2.named_tensors(prefix + "fc2.")


class Head(Module):
    """Global average pool over tokens/spatial positions, then a linear classifier."""

    def __init__(self, c: int, classes: int, *, rng: np.random.Generator):
        self.fc = Linear(c, classes, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            pooled = x.mean(axis=(2, 3))
        elif x.ndim == 3:
            pooled = x.mean(axis=1)
        else:
            raise ShapeError(f"head expects rank-3 or rank-4 input, got shape {x.shape}")
        return self.fc(pooled)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.fc.named_tensors(prefix + "fc.")


def to_tokens(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C]; the single 4D->3D transition."""
    b, c, h, w = x.shape
    return x.reshape((b, c, h * w)).transpose((0, 2, 1))


def to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """[B, H*W, C] -> [B, C, H, W]; inverse of ``to_tokens``."""
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"token count {n} does not match grid {h}x{w}")
    return x.transpose((0, 2, 1)).reshape((b, c, h, w))
