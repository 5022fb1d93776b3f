"""Single-width supernet: every block slot holds candidate branches (4D block,
3D block in the late stages, identity) mixed by a softmax over perturbed
branch logits. Importance scores derived from the logits drive the slimming
search.

Branch mixing in stages 3-4 happens in the token layout: the 4D->3D
transition is fixed at the entry of stage 3, and 4D candidates are applied
through a reshape round trip so every branch output is summable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import arch as arch_mod
from .arch import (DEFAULT_D_QK, DEFAULT_D_V, DEFAULT_EXP, DEFAULT_HEADS,
                   ArchSpec, IdentitySpec, Mb3dSpec, Mb4dSpec, StageSpec)
from .blocks import (Downsample, Head, Mb3d, Mb4d, Module, NamedTensor, Stem,
                     to_grid, to_tokens)
from .errors import ShapeError, SpecError
from .model import Model
from .tensor import Tensor

EARLY_KINDS = ("4d", "id")
LATE_KINDS = ("4d", "3d", "id")


@dataclass(frozen=True)
class GumbelConfig:
    """Temperature and exploration-noise settings for branch sampling.

    The default noise follows the mixing formula as written (uniform noise on
    [0, 1) added to the logits); ``standard_gumbel`` substitutes
    -log(-log u) for conventional Gumbel-softmax behavior.
    """

    tau: float = 1.0
    noise_kind: str = "uniform_as_written"
    noise: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.noise_kind not in ("uniform_as_written", "standard_gumbel"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")


def branch_weights(alpha: Tensor, cfg: GumbelConfig,
                   rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> Tensor:
    """Simplex weights softmax((alpha + eps) / tau); differentiable in alpha."""
    n = alpha.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 branches, got {n}")
    if eps is None:
        if cfg.noise and rng is not None:
            u = rng.random(n)
            if cfg.noise_kind == "standard_gumbel":
                eps = -np.log(-np.log(u + 1e-12) + 1e-12)
            else:
                eps = u
        else:
            eps = np.zeros(n)
    z = (alpha + Tensor(eps)) * (1.0 / cfg.tau)
    shifted = z - Tensor(z.data.max())
    e = shifted.exp()
    return e / e.sum()


def _pick(w: Tensor, i: int) -> Tensor:
    onehot = np.zeros(w.shape[0], dtype=np.float32)
    onehot[i] = 1.0
    return (w * Tensor(onehot)).sum()


@dataclass(frozen=True)
class SuperSkeleton:
    """Static shape of a supernet: maximal widths and slot counts."""

    stem_mid: int
    widths: Tuple[int, int, int, int]
    depths: Tuple[int, int, int, int]
    classes: int = 1000
    resolution: int = 224
    heads: int = DEFAULT_HEADS
    d_qk: int = DEFAULT_D_QK
    d_v: int = DEFAULT_D_V
    exp: int = DEFAULT_EXP

    def stage_resolution(self, j: int) -> int:
        return self.resolution // (4 * 2 ** j)

    def to_dict(self) -> dict:
        return {"stem_mid": self.stem_mid, "widths": list(self.widths),
                "depths": list(self.depths), "classes": self.classes,
                "resolution": self.resolution, "heads": self.heads,
                "d_qk": self.d_qk, "d_v": self.d_v, "exp": self.exp}

    @staticmethod
    def from_dict(d: dict) -> "SuperSkeleton":
        return SuperSkeleton(stem_mid=d["stem_mid"], widths=tuple(d["widths"]),
                             depths=tuple(d["depths"]), classes=d["classes"],
                             resolution=d["resolution"], heads=d["heads"],
                             d_qk=d["d_qk"], d_v=d["d_v"], exp=d["exp"])


def toy_skeleton(classes: int = 4, resolution: int = 64) -> SuperSkeleton:
    return SuperSkeleton(stem_mid=8, widths=(16, 32, 48, 64), depths=(2, 2, 2, 2),
                         classes=classes, resolution=resolution)


def preset_skeleton(name: str, classes: int = 1000, resolution: int = 224) -> SuperSkeleton:
    spec = arch_mod.preset(name, classes, resolution)
    return SuperSkeleton(stem_mid=spec.stem_mid,
                         widths=tuple(s.width for s in spec.stages),
                         depths=tuple(len(s.blocks) for s in spec.stages),
                         classes=classes, resolution=resolution)


class MetaPath(Module):
    """One block slot: candidate branches plus one trainable logit per branch."""

    def __init__(self, stage: int, index: int, width: int, kinds: Tuple[str, ...],
                 n_tokens: int, sk: SuperSkeleton, *, rng: np.random.Generator):
        self.stage = stage  # 0-based
        self.index = index
        self.width = width
        self.kinds = kinds
        self.blocks: Dict[str, Module] = {}
        for kind in kinds:
            if kind == "4d":
                self.blocks[kind] = Mb4d(width, sk.exp, rng=rng)
            elif kind == "3d":
                self.blocks[kind] = Mb3d(width, sk.heads, sk.d_qk, sk.d_v, sk.exp,
                                         n_tokens, rng=rng)
        self.alpha = Tensor(np.zeros(len(kinds), dtype=np.float32), requires_grad=True)

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield prefix + "alpha", self.alpha, True
        for kind, blk in self.blocks.items():
            yield from blk.named_tensors(f"{prefix}{kind}.")


class SuperNet(Module):
    def __init__(self, sk: SuperSkeleton, seed: int = 0):
        self.skeleton = sk
        rng = np.random.default_rng(seed)
        self.stem = Stem(sk.stem_mid, sk.widths[0], rng=rng)
        self.downsamples: List[Optional[Downsample]] = []
        self.paths: List[MetaPath] = []
        prev = sk.widths[0]
        for j in range(4):
            self.downsamples.append(Downsample(prev, sk.widths[j], rng=rng) if j > 0 else None)
            kinds = EARLY_KINDS if j < 2 else LATE_KINDS
            n_tok = sk.stage_resolution(j) ** 2
            for i in range(sk.depths[j]):
                self.paths.append(MetaPath(j, i, sk.widths[j], kinds, n_tok, sk, rng=rng))
            prev = sk.widths[j]
        self.head = Head(sk.widths[3], sk.classes, rng=rng)

    # ---- structure helpers ----------------------------------------------------

    def stage_paths(self, j: int) -> List[MetaPath]:
        return [p for p in self.paths if p.stage == j]

    def alphas(self) -> List[Tensor]:
        return [p.alpha for p in self.paths]

    # ---- forward --------------------------------------------------------------

    def sample_forward(self, x: Tensor, cfg: GumbelConfig,
                       rng: Optional[np.random.Generator] = None,
                       training: bool = False,
                       forced_weights: Optional[Dict[int, np.ndarray]] = None,
                       stage_masks: Optional[Dict[int, np.ndarray]] = None) -> Tensor:
        """Weight-mixed forward through every slot.

        ``forced_weights`` maps path index -> fixed simplex weights (used by
        the slimming evaluator); ``stage_masks`` maps stage -> 0/1 channel
        mask applied to that stage's features (width-reduction proxy).
        """
        sk = self.skeleton
        if x.shape[2] != sk.resolution or x.shape[3] != sk.resolution:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} does not match "
                             f"supernet resolution {sk.resolution}")
        y = self.stem(x, training)
        path_idx = 0
        for j in range(4):
            ds = self.downsamples[j]
            if ds is not None:
                if j >= 3:  # stage 4 entry: features are tokens, embed in 4D
                    r = sk.stage_resolution(j - 1)
                    y = ds(to_grid(y, r, r), training)
                    y = to_tokens(y)
                else:
                    y = ds(y, training)
            if j == 2:
                y = to_tokens(y)  # the partition switch, fixed at stage-3 entry
            mask = None if stage_masks is None else stage_masks.get(j)
            if mask is not None:
                m = mask.astype(np.float32)
                y = y * Tensor(m.reshape(1, -1, 1, 1) if y.ndim == 4 else m.reshape(1, 1, -1))
            for p in self.stage_paths(j):
                if forced_weights is not None and path_idx in forced_weights:
                    w: Optional[Tensor] = None
                    wdata = np.asarray(forced_weights[path_idx], dtype=np.float32)
                else:
                    w = branch_weights(p.alpha, cfg, rng)
                    wdata = None
                mixed = None
                for k_i, kind in enumerate(p.kinds):
                    if wdata is not None and wdata[k_i] == 0.0:
                        continue
                    if kind == "id":
                        out = y
                    elif kind == "4d":
                        if j < 2:
                            out = p.blocks[kind](y, training)
                        else:
                            r = sk.stage_resolution(j)
                            out = to_tokens(p.blocks[kind](to_grid(y, r, r), training))
                    else:  # 3d candidate, token layout
                        out = p.blocks[kind](y, training)
                    wk = Tensor(wdata[k_i]) if wdata is not None else _pick(w, k_i)
                    term = out * wk
                    mixed = term if mixed is None else mixed + term
                y = mixed
                if mask is not None:
                    m = mask.astype(np.float32)
                    y = y * Tensor(m.reshape(1, -1, 1, 1) if y.ndim == 4 else m.reshape(1, 1, -1))
                path_idx += 1
        return self.head(y)

    # ---- importance -----------------------------------------------------------

    def importance_scores(self) -> Tuple[List[float], List[float]]:
        """Per-slot scores and per-stage sums, from softplus-transformed logits.

        Early stages: sp(a_4d) / sp(a_id); late: (sp(a_3d) + sp(a_4d)) / sp(a_id).
        Softplus keeps both sides positive so the ratio is well defined.
        """
        per_path = [path_importance(p.alpha.data, p.kinds) for p in self.paths]
        sums = [0.0] * 4
        for p, s in zip(self.paths, per_path):
            sums[p.stage] += s
        return per_path, sums

    def named_tensors(self, prefix: str = "") -> Iterator[NamedTensor]:
        yield from self.stem.named_tensors(prefix + "stem.")
        for j in range(4):
            ds = self.downsamples[j]
            if ds is not None:
                yield from ds.named_tensors(f"{prefix}stage{j + 1}.embed.")
        for p in self.paths:
            yield from p.named_tensors(f"{prefix}stage{p.stage + 1}.path{p.index}.")
        yield from self.head.named_tensors(prefix + "head.")

    # ---- extraction -----------------------------------------------------------

    def derive_arch(self, keep: Optional[Sequence[bool]] = None,
                    last_n_3d: Optional[int] = None,
                    stage_widths: Optional[Sequence[int]] = None,
                    classes: Optional[int] = None) -> ArchSpec:
        """Materialize a concrete spec: kept slots become blocks, identity
        slots are dropped, and the last ``last_n_3d`` kept late-stage slots
        become 3D blocks."""
        sk = self.skeleton
        if keep is None or last_n_3d is None:
            d_keep, d_n3 = self._default_choices()
            keep = keep if keep is not None else d_keep
            last_n_3d = last_n_3d if last_n_3d is not None else d_n3
        if len(keep) != len(self.paths):
            raise SpecError(f"keep vector length {len(keep)} != slot count {len(self.paths)}")
        widths = tuple(stage_widths) if stage_widths is not None else sk.widths
        late_kept = sum(1 for p, k in zip(self.paths, keep) if k and p.stage >= 2)
        if last_n_3d > late_kept:
            raise SpecError(f"cannot place {last_n_3d} 3D blocks into {late_kept} kept late slots")
        late_rank = 0
        stages: List[StageSpec] = []
        kept_late_total = late_kept
        for j in range(4):
            blocks: List = []
            for p, k in zip(self.paths, keep):
                if p.stage != j or not k:
                    continue
                if j >= 2:
                    late_rank += 1
                    if late_rank > kept_late_total - last_n_3d:
                        blocks.append(Mb3dSpec(widths[j], sk.heads, sk.d_qk, sk.d_v, sk.exp))
                        continue
                blocks.append(Mb4dSpec(widths[j], sk.exp))
            stages.append(StageSpec(width=widths[j], blocks=tuple(blocks), downsample=j > 0))
        spec = ArchSpec(stem_mid=sk.stem_mid, stages=tuple(stages),
                        classes=classes if classes is not None else sk.classes,
                        resolution=sk.resolution)
        arch_mod.check(spec)
        return spec

    def _default_choices(self) -> Tuple[List[bool], int]:
        keep: List[bool] = []
        n3 = 0
        for p in self.paths:
            sel = p.kinds[int(np.argmax(_softplus(p.alpha.data)))]
            keep.append(sel != "id")
            if sel == "3d":
                n3 += 1
        return keep, n3

    def extract_model(self, kinds_per_slot: Sequence[str], seed: int = 0) -> Model:
        """Build a concrete model for an explicit per-slot kind assignment
        ("4d" / "3d" / "id"), sharing this supernet's weights."""
        if len(kinds_per_slot) != len(self.paths):
            raise SpecError("kind assignment length does not match slot count")
        sk = self.skeleton
        stages: List[StageSpec] = []
        for j in range(4):
            blocks: List = []
            for p, kind in zip(self.paths, kinds_per_slot):
                if p.stage != j or kind == "id":
                    continue
                if kind not in p.kinds:
                    raise SpecError(f"slot stage {j + 1} index {p.index} has no {kind!r} candidate")
                if kind == "4d":
                    blocks.append(Mb4dSpec(sk.widths[j], sk.exp))
                else:
                    blocks.append(Mb3dSpec(sk.widths[j], sk.heads, sk.d_qk, sk.d_v, sk.exp))
            stages.append(StageSpec(width=sk.widths[j], blocks=tuple(blocks), downsample=j > 0))
        spec = ArchSpec(stem_mid=sk.stem_mid, stages=tuple(stages),
                        classes=sk.classes, resolution=sk.resolution)
        arch_mod.check(spec)
        model = Model(spec, seed)
        state = {}
        for name, t, _ in self.stem.named_tensors("stem."):
            state[name] = t.data
        for j in range(4):
            ds = self.downsamples[j]
            if ds is not None:
                for name, t, _ in ds.named_tensors(f"stage{j + 1}.embed."):
                    state[name] = t.data
            b_i = 0
            for p, kind in zip(self.paths, kinds_per_slot):
                if p.stage != j or kind == "id":
                    continue
                for name, t, _ in p.blocks[kind].named_tensors(f"stage{j + 1}.block{b_i}."):
                    state[name] = t.data
                b_i += 1
        for name, t, _ in self.head.named_tensors("head."):
            state[name] = t.data
        model.load_state(state)
        return model


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def path_importance(alpha: np.ndarray, kinds: Tuple[str, ...]) -> float:
    sp = _softplus(np.asarray(alpha, dtype=np.float64))
    by_kind = dict(zip(kinds, sp))
    num = by_kind.get("4d", 0.0) + by_kind.get("3d", 0.0)
    return float(num / by_kind["id"])
