"""Synthetic labeled image datasets for desk-scale training.

Two generator kinds:
  quadrant-pattern: the image grid is split into cells; the cell matching the
      class index is brightened by a fixed template, plus Gaussian noise.
  gaussian-blob: a smooth bump centered in the class's cell.

Classes are balanced by construction (labels cycle 0..classes-1 before a
seeded shuffle), and splits are disjoint by a seeded index partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from . import checkpoint
from .errors import SpecError

GENERATOR_KINDS = ("quadrant-pattern", "gaussian-blob")


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 4
    resolution: int = 64
    train: int = 512
    val: int = 128
    test: int = 128
    seed: int = 0
    kind: str = "quadrant-pattern"
    noise: float = 0.25
    amplitude: float = 1.0

    def __post_init__(self):
        if self.resolution % 32 != 0:
            raise SpecError(f"resolution {self.resolution} is not a multiple of 32")
        if self.kind not in GENERATOR_KINDS:
            raise SpecError(f"unknown generator kind {self.kind!r}; expected {GENERATOR_KINDS}")
        if self.classes < 2:
            raise SpecError("need at least 2 classes")


Split = Tuple[np.ndarray, np.ndarray]  # images [N,3,R,R] float32, labels [N] int64


def templates(spec: DatasetSpec) -> np.ndarray:
    """Noise-free class templates, [classes, 3, R, R]."""
    g = math.ceil(math.sqrt(spec.classes))
    r = spec.resolution
    cell = r // g
    out = np.zeros((spec.classes, 3, r, r), dtype=np.float32)
    for c in range(spec.classes):
        gy, gx = divmod(c, g)
        y0, x0 = gy * cell, gx * cell
        if spec.kind == "quadrant-pattern":
            out[c, :, y0 : y0 + cell, x0 : x0 + cell] = spec.amplitude
        else:
            yy, xx = np.mgrid[0:r, 0:r]
            cy, cx = y0 + cell / 2, x0 + cell / 2
            sigma = cell / 3.0
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            out[c] = spec.amplitude * bump.astype(np.float32)
    return out


def gen_synthetic(spec: DatasetSpec) -> Dict[str, Split]:
    """Deterministic for a fixed spec; returns {"train", "val", "test"} splits."""
    rng = np.random.default_rng(spec.seed)
    total = spec.train + spec.val + spec.test
    labels = np.arange(total, dtype=np.int64) % spec.classes  # balanced by construction
    tmpl = templates(spec)
    images = rng.normal(0.0, spec.noise, size=(total, 3, spec.resolution, spec.resolution))
    images = (images + tmpl[labels]).astype(np.float32)
    order = rng.permutation(total)
    splits = {}
    offsets = {"train": (0, spec.train),
               "val": (spec.train, spec.train + spec.val),
               "test": (spec.train + spec.val, total)}
    for name, (lo, hi) in offsets.items():
        idx = order[lo:hi]
        splits[name] = (images[idx], labels[idx])
    return splits


def nearest_template_accuracy(spec: DatasetSpec, split: Split) -> float:
    """Classify by nearest class template (L2); the oracle for noise=0 data."""
    x, y = split
    t = templates(spec).reshape(spec.classes, -1)
    xf = x.reshape(len(x), -1)
    d = ((xf[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == y).mean())


def batches(split: Split, batch: int, rng: np.random.Generator | None = None
            ) -> Iterator[Split]:
    x, y = split
    n = len(y)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch):
        idx = order[i : i + batch]
        yield x[idx], y[idx]


def save_cache(path, splits: Dict[str, Split]) -> None:
    tensors = {}
    for name, (x, y) in splits.items():
        tensors[f"{name}.x"] = x
        tensors[f"{name}.y"] = y.astype(np.float32)
    checkpoint.save_tensors(path, tensors, meta={"format": "vitslim-dataset-v1"})


def load_cache(path) -> Dict[str, Split]:
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("format") != "vitslim-dataset-v1":
        raise SpecError(f"{path}: not a dataset cache")
    names = sorted({k.split(".")[0] for k in tensors})
    return {n: (tensors[f"{n}.x"], tensors[f"{n}.y"].astype(np.int64)) for n in names}
