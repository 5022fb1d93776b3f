"""Training loops: final-model supervised training, supernet pretraining with
temperature-annealed branch sampling, and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import checkpoint, data as data_mod
from .errors import VitslimError
from .model import Model
from .optim import AdamW, Schedule, lr_at
from .ops import cross_entropy
from .supernet import GumbelConfig, SuperNet
from .tensor import Tensor, no_grad


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    loss: float
    top1: float


METRICS_HEADER = ["epoch", "step", "lr", "loss", "top1"]


def write_metrics_csv(path, metrics: List[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.epoch, m.step, f"{m.lr:.8g}", f"{m.loss:.6f}", f"{m.top1:.4f}"])


def evaluate(model, split: data_mod.Split, batch: int = 64) -> float:
    """Top-1 fraction on a split; errors on an empty split."""
    x, y = split
    if len(y) == 0:
        raise VitslimError("cannot evaluate on an empty split")
    correct = 0
    with no_grad():
        for xb, yb in data_mod.batches((x, y), batch):
            logits = model(Tensor(xb))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(y)


def train_final(model: Model, splits: Dict[str, data_mod.Split], epochs: int,
                schedule: Optional[Schedule] = None, batch: int = 64,
                weight_decay: float = 0.05, seed: int = 0,
                log_every: Optional[int] = None) -> List[EpochMetrics]:
    """Plain cross-entropy training of a concrete model."""
    train = splits["train"]
    if model.spec.classes <= int(train[1].max()):
        raise VitslimError(f"model head has {model.spec.classes} classes but labels reach "
                           f"{int(train[1].max())}")
    steps_per_epoch = math.ceil(len(train[1]) / batch)
    if schedule is None:
        schedule = Schedule(base_lr=1e-3, min_lr=1e-5,
                            warmup_epochs=min(max(1, epochs // 10), epochs - 1),
                            total_epochs=epochs, steps_per_epoch=steps_per_epoch)
    opt = AdamW(model.params(), weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    metrics: List[EpochMetrics] = []
    step = 0
    for epoch in range(epochs):
        losses = []
        correct = total = 0
        for xb, yb in data_mod.batches(train, batch, rng):
            lr = lr_at(step, schedule)
            logits = model(Tensor(xb), training=True)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise VitslimError(f"training diverged (non-finite loss) at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(yb)
            step += 1
        metrics.append(EpochMetrics(epoch, step, lr_at(step, schedule),
                                    float(np.mean(losses)), correct / total))
    return metrics


def anneal_tau(epoch: int, total_epochs: int, start: float = 5.0, end: float = 0.1) -> float:
    """Linear temperature schedule across supernet training."""
    if total_epochs <= 1:
        return end
    t = epoch / (total_epochs - 1)
    return start + (end - start) * t


def train_supernet(sn: SuperNet, splits: Dict[str, data_mod.Split], epochs: int,
                   schedule: Optional[Schedule] = None, batch: int = 64,
                   weight_decay: float = 0.05, seed: int = 0,
                   noise_kind: str = "uniform_as_written",
                   checkpoint_dir: Optional[Path] = None) -> List[EpochMetrics]:
    """Joint training of shared block weights and branch logits.

    The sampling temperature anneals 5.0 -> 0.1 linearly over the run. A
    checkpoint is written each epoch when a directory is given; on divergence
    the last good checkpoint survives and an error is raised.
    """
    train = splits["train"]
    steps_per_epoch = math.ceil(len(train[1]) / batch)
    if schedule is None:
        schedule = Schedule(base_lr=1e-3, min_lr=1e-5,
                            warmup_epochs=min(max(1, epochs // 10), epochs - 1),
                            total_epochs=epochs, steps_per_epoch=steps_per_epoch)
    opt = AdamW(sn.params(), weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    sample_rng = np.random.default_rng(seed + 1)
    metrics: List[EpochMetrics] = []
    step = 0
    for epoch in range(epochs):
        cfg = GumbelConfig(tau=anneal_tau(epoch, epochs), noise_kind=noise_kind)
        losses = []
        correct = total = 0
        for xb, yb in data_mod.batches(train, batch, rng):
            lr = lr_at(step, schedule)
            logits = sn.sample_forward(Tensor(xb), cfg, sample_rng, training=True)
            loss = cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise VitslimError(f"supernet training diverged at step {step}; "
                                   f"last good checkpoint is epoch {epoch - 1}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(yb)
            step += 1
        metrics.append(EpochMetrics(epoch, step, lr_at(step, schedule),
                                    float(np.mean(losses)), correct / total))
        if checkpoint_dir is not None:
            save_supernet(Path(checkpoint_dir) / f"supernet-epoch{epoch:03d}.ckpt", sn)
            save_supernet(Path(checkpoint_dir) / "supernet-last.ckpt", sn)
    return metrics


def save_supernet(path, sn: SuperNet) -> None:
    checkpoint.save_tensors(path, sn.state(), meta={"skeleton": sn.skeleton.to_dict()})


def load_supernet(path) -> SuperNet:
    from .supernet import SuperSkeleton

    tensors, meta = checkpoint.load_tensors(path)
    if "skeleton" not in meta:
        raise VitslimError(f"{path}: checkpoint has no supernet skeleton metadata")
    sn = SuperNet(SuperSkeleton.from_dict(meta["skeleton"]))
    sn.load_state(tensors)
    return sn


def save_model(path, model: Model) -> None:
    from . import arch as arch_mod

    checkpoint.save_tensors(path, model.state(), meta={"arch": arch_mod.to_json(model.spec)})


def load_model(path) -> Model:
    from . import arch as arch_mod

    tensors, meta = checkpoint.load_tensors(path)
    if "arch" not in meta:
        raise VitslimError(f"{path}: checkpoint has no architecture metadata")
    model = Model(arch_mod.from_json(meta["arch"]))
    model.load_state(tensors)
    return model
