"""Runnable model instantiated from an architecture description."""

from __future__ import annotations

from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import arch as arch_mod
from .arch import ArchSpec
from .blocks import (Downsample, Head, Mb3d, Mb4d, Module, NamedTensor, Stem,
                     to_grid, to_tokens)
from .errors import ShapeError, SpecError
from .tensor import Tensor


class Model(Module):
    """Stem -> 4 stages (single 4D->3D reshape before the first 3D block) -> head."""

    def __init__(self, spec: ArchSpec, seed: int = 0):
        arch_mod.check(spec)
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.stem = Stem(spec.stem_mid, spec.stages[0].width, rng=rng)
        self.downsamples: List[Optional[Downsample]] = []
        self.stages: List[List[Module]] = []
        prev = spec.stages[0].width
        for j, stage in enumerate(spec.stages):
            self.downsamples.append(Downsample(prev, stage.width, rng=rng) if stage.downsample else None)
            blocks: List[Module] = []
            n_tok = spec.stage_resolution(j) ** 2
            for b in stage.blocks:
                if b.kind == "identity":
                    continue
                if b.kind == "mb4d":
                    blocks.append(Mb4d(b.width, b.exp, rng=rng))
                else:
                    blocks.append(Mb3d(b.width, b.heads, b.d_qk, b.d_v, b.exp, n_tok, rng=rng))
            self.stages.append(blocks)
            prev = stage.width
        self.head = Head(spec.stages[3].width, spec.classes, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input [B, 3, H, W], got shape {x.shape}")
        if x.shape[2] != self.spec.resolution or x.shape[3] != self.spec.resolution:
            raise ShapeError(
                f"input resolution {x.shape[2]}x{x.shape[3]} does not match spec "
                f"resolution {self.spec.resolution}")
        y = self.stem(x, training)
        in_tokens = False
        for j, blocks in enumerate(self.stages):
            ds = self.downsamples[j]
            if ds is not None:
                if in_tokens:
                    r = self.spec.stage_resolution(j - 1)
                    y = to_grid(y, r, r)
                    in_tokens = False
                y = ds(y, training)
            for blk in blocks:
                if isinstance(blk, Mb3d) and not in_tokens:
                    y = to_tokens(y)
                    in_tokens = True
                y = blk(y, training)
        return self.head(y)

    __call__ = forward

    def fold(self) -> None:
        """Fold every BN into its preceding conv for the inference path."""
        self.stem.fold()
        for ds in self.downsamples:
            if ds is not None:
                ds.fold()
        for blocks in self.stages:
            for blk in blocks:
                blk.fold()

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.stem.named_tensors(prefix + "stem.")
        for j, blocks in enumerate(self.stages):
            ds = self.downsamples[j]
            if ds is not None:
                yield from ds.named_tensors(f"{prefix}stage{j + 1}.embed.")
            for i, blk in enumerate(blocks):
                yield from blk.named_tensors(f"{prefix}stage{j + 1}.block{i}.")
        yield from self.head.named_tensors(prefix + "head.")


def instantiate(spec: ArchSpec, seed: int = 0) -> Model:
    return Model(spec, seed)
