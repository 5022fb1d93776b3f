"""Concrete architecture descriptions: validation, presets, parameter/MAC
accounting, and a versioned JSON serialization (schema "vitslim-arch-v1").

A network is a conv stem (two 3x3/s2 convs), four stages of blocks separated
by 3x3/s2 downsampling embeddings, and a pool+linear head. 4D pool-mixer
blocks may appear anywhere; 3D attention blocks only in the last two stages,
and only after the last 4D block of their stage, so a single reshape
separates the two partitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

from .errors import SpecError

SCHEMA = "vitslim-arch-v1"

# Attention defaults: 8 heads with 32-dim queries/keys; the per-head value
# dimension is 4x the key dimension (kept configurable per block).
DEFAULT_HEADS = 8
DEFAULT_D_QK = 32
DEFAULT_D_V = 128
DEFAULT_EXP = 4


@dataclass(frozen=True)
class Mb4dSpec:
    width: int
    exp: int = DEFAULT_EXP
    kind: str = field(default="mb4d", init=False)


@dataclass(frozen=True)
class Mb3dSpec:
    width: int
    heads: int = DEFAULT_HEADS
    d_qk: int = DEFAULT_D_QK
    d_v: int = DEFAULT_D_V
    exp: int = DEFAULT_EXP
    kind: str = field(default="mb3d", init=False)


@dataclass(frozen=True)
class IdentitySpec:
    kind: str = field(default="identity", init=False)


BlockSpec = Union[Mb4dSpec, Mb3dSpec, IdentitySpec]


@dataclass(frozen=True)
class StageSpec:
    width: int
    blocks: Tuple[BlockSpec, ...]
    downsample: bool = True  # 3x3/s2 embedding in front of the stage


@dataclass(frozen=True)
class ArchSpec:
    stem_mid: int
    stages: Tuple[StageSpec, StageSpec, StageSpec, StageSpec]
    classes: int = 1000
    resolution: int = 224

    @property
    def depth(self) -> int:
        return sum(len([b for b in s.blocks if b.kind != "identity"]) for s in self.stages)

    def stage_resolution(self, j: int) -> int:
        """Spatial side length of stage j (0-based) for this spec's input size."""
        return self.resolution // (4 * 2 ** j)

    def tokens(self) -> int:
        return self.stage_resolution(3) ** 2


def validate(spec: ArchSpec) -> List[str]:
    """Return a list of violations; empty means the spec is well formed."""
    v: List[str] = []
    if len(spec.stages) != 4:
        v.append(f"expected exactly 4 stages, got {len(spec.stages)}")
        return v
    if spec.resolution % 32 != 0 or spec.resolution <= 0:
        v.append(f"input resolution {spec.resolution} is not a positive multiple of 32")
    if spec.stem_mid < 1:
        v.append(f"stem intermediate width {spec.stem_mid} must be >= 1")
    if spec.classes < 1:
        v.append(f"class count {spec.classes} must be >= 1")
    if spec.stages[0].downsample:
        v.append("stage 1 must not carry a downsampling embedding (the stem feeds it)")
    for j, stage in enumerate(spec.stages):
        if stage.width < 16:
            v.append(f"stage {j + 1} width {stage.width} below the minimum of 16")
        if j > 0 and not stage.downsample:
            v.append(f"stage {j + 1} is missing its downsampling embedding")
        seen_3d = False
        for i, b in enumerate(stage.blocks):
            if b.kind == "identity":
                continue
            if b.width != stage.width:
                v.append(f"stage {j + 1} block {i + 1}: width {b.width} != stage width {stage.width}")
            if b.kind == "mb3d":
                if j < 2:
                    v.append(f"stage {j + 1} block {i + 1}: 3D block in early stage")
                seen_3d = True
            elif b.kind == "mb4d" and seen_3d:
                v.append(f"stage {j + 1} block {i + 1}: dimension inconsistency (4D block after a 3D block)")
    # the 4D->3D transition happens once across stages 3-4 as well
    if any(b.kind == "mb3d" for b in spec.stages[2].blocks) and \
            any(b.kind == "mb4d" for b in spec.stages[3].blocks):
        v.append("stage 4: dimension inconsistency (4D block after a 3D block in stage 3)")
    return v


def check(spec: ArchSpec) -> None:
    violations = validate(spec)
    if violations:
        raise SpecError("invalid architecture: " + "; ".join(violations))


# ---- presets -------------------------------------------------------------------

_PRESETS = {
    # name: (stem_mid, widths, 4d depths, 3d depth in stage 4)
    "L1": (24, (48, 96, 224, 448), (3, 2, 6, 3), 1),
    "L3": (32, (64, 128, 320, 512), (4, 4, 12, 3), 3),
    # stage-3 depth 18 reproduces the published parameter/MAC totals
    "L7": (48, (96, 192, 384, 768), (6, 6, 18, 0), 8),
}


def preset(name: str, classes: int = 1000, resolution: int = 224) -> ArchSpec:
    if name not in _PRESETS:
        raise SpecError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}")
    stem_mid, widths, d4, n3 = _PRESETS[name]
    stages = []
    for j, w in enumerate(widths):
        blocks: List[BlockSpec] = [Mb4dSpec(w) for _ in range(d4[j])]
        if j == 3:
            blocks += [Mb3dSpec(w) for _ in range(n3)]
        stages.append(StageSpec(width=w, blocks=tuple(blocks), downsample=j > 0))
    return ArchSpec(stem_mid=stem_mid, stages=tuple(stages), classes=classes, resolution=resolution)


def toy_arch(classes: int = 4, resolution: int = 64) -> ArchSpec:
    """Small desk-scale network with the same structure as the presets."""
    widths = (16, 32, 48, 64)
    depths = (2, 2, 2, 1)
    stages = []
    for j, w in enumerate(widths):
        blocks: List[BlockSpec] = [Mb4dSpec(w) for _ in range(depths[j])]
        if j == 3:
            blocks = blocks + [Mb3dSpec(w)]
        stages.append(StageSpec(width=w, blocks=tuple(blocks), downsample=j > 0))
    return ArchSpec(stem_mid=8, stages=tuple(stages), classes=classes, resolution=resolution)


# ---- accounting ----------------------------------------------------------------


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _bn_params(c: int) -> int:
    return 2 * c  # trainable affine; running stats tracked separately


def _linear_params(cin: int, cout: int) -> int:
    return cin * cout + cout


def block_params(b: BlockSpec, tokens: int) -> int:
    if b.kind == "identity":
        return 0
    if b.kind == "mb4d":
        h = b.width * b.exp
        return (_conv_params(b.width, h, 1) + _bn_params(h)
                + _conv_params(h, b.width, 1) + _bn_params(b.width))
    if b.kind == "mb3d":
        qk = b.heads * b.d_qk
        vd = b.heads * b.d_v
        attn = (2 * _linear_params(b.width, qk) + _linear_params(b.width, vd)
                + _linear_params(vd, b.width) + b.heads * tokens * tokens)
        mlp = _linear_params(b.width, b.width * b.exp) + _linear_params(b.width * b.exp, b.width)
        return attn + mlp + 2 * (2 * b.width)  # two layer norms
    raise SpecError(f"unknown block kind {b.kind!r}")


def count_params(spec: ArchSpec) -> int:
    """Trainable parameter count (BN running statistics excluded)."""
    check(spec)
    total = (_conv_params(3, spec.stem_mid, 3) + _bn_params(spec.stem_mid)
             + _conv_params(spec.stem_mid, spec.stages[0].width, 3) + _bn_params(spec.stages[0].width))
    prev = spec.stages[0].width
    for j, stage in enumerate(spec.stages):
        n_tok = spec.stage_resolution(j) ** 2
        if stage.downsample:
            total += _conv_params(prev, stage.width, 3) + _bn_params(stage.width)
        total += sum(block_params(b, n_tok) for b in stage.blocks)
        prev = stage.width
    total += _linear_params(spec.stages[3].width, spec.classes)
    return total


def block_macs(b: BlockSpec, res: int) -> int:
    """Per-image multiply-accumulate count of one block at spatial side ``res``."""
    if b.kind == "identity":
        return 0
    if b.kind == "mb4d":
        h = b.width * b.exp
        return (b.width * h + h * b.width) * res * res  # two 1x1 convs; pool is free
    if b.kind == "mb3d":
        n = res * res
        qk = b.heads * b.d_qk
        vd = b.heads * b.d_v
        proj = n * (2 * b.width * qk + b.width * vd + vd * b.width)
        attn = b.heads * n * n * (b.d_qk + b.d_v)
        mlp = n * 2 * b.width * (b.width * b.exp)
        return proj + attn + mlp
    raise SpecError(f"unknown block kind {b.kind!r}")


def count_macs(spec: ArchSpec, resolution: Optional[int] = None) -> int:
    """Per-image MACs; convs and linears counted, pooling/normalization free."""
    check(spec)
    res = resolution if resolution is not None else spec.resolution
    if res % 32 != 0:
        raise SpecError(f"resolution {res} is not a multiple of 32")
    total = 3 * spec.stem_mid * 9 * (res // 2) ** 2
    total += spec.stem_mid * spec.stages[0].width * 9 * (res // 4) ** 2
    prev = spec.stages[0].width
    for j, stage in enumerate(spec.stages):
        r = res // (4 * 2 ** j)
        if stage.downsample:
            total += prev * stage.width * 9 * r * r
        total += sum(block_macs(b, r) for b in stage.blocks)
        prev = stage.width
    total += spec.stages[3].width * spec.classes
    return total


# ---- JSON serialization --------------------------------------------------------


def _block_to_dict(b: BlockSpec) -> dict:
    if b.kind == "identity":
        return {"kind": "identity"}
    if b.kind == "mb4d":
        return {"kind": "mb4d", "width": b.width, "exp": b.exp}
    return {"kind": "mb3d", "width": b.width, "heads": b.heads,
            "d_qk": b.d_qk, "d_v": b.d_v, "exp": b.exp}


def to_json(spec: ArchSpec) -> str:
    doc = {
        "schema": SCHEMA,
        "stem_mid": spec.stem_mid,
        "resolution": spec.resolution,
        "classes": spec.classes,
        "stages": [
            {"width": s.width, "downsample": s.downsample,
             "blocks": [_block_to_dict(b) for b in s.blocks]}
            for s in spec.stages
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise SpecError(f"missing key {path}.{key}")
    return doc[key]


def _block_from_dict(d: dict, path: str) -> BlockSpec:
    kind = _require(d, "kind", path)
    if kind == "identity":
        return IdentitySpec()
    if kind == "mb4d":
        return Mb4dSpec(width=int(_require(d, "width", path)), exp=int(d.get("exp", DEFAULT_EXP)))
    if kind == "mb3d":
        return Mb3dSpec(width=int(_require(d, "width", path)),
                        heads=int(d.get("heads", DEFAULT_HEADS)),
                        d_qk=int(d.get("d_qk", DEFAULT_D_QK)),
                        d_v=int(d.get("d_v", DEFAULT_D_V)),
                        exp=int(d.get("exp", DEFAULT_EXP)))
    raise SpecError(f"unknown block kind {kind!r} at {path}")


def from_json(text: str) -> ArchSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SpecError("architecture document must be a JSON object")
    schema = _require(doc, "schema", "$")
    if schema != SCHEMA:
        raise SpecError(f"unsupported schema {schema!r}; expected {SCHEMA!r}")
    stages_doc = _require(doc, "stages", "$")
    if not isinstance(stages_doc, list) or len(stages_doc) != 4:
        raise SpecError("$.stages must be a list of exactly 4 stages")
    stages = []
    for j, sd in enumerate(stages_doc):
        path = f"$.stages[{j}]"
        blocks = tuple(_block_from_dict(bd, f"{path}.blocks[{i}]")
                       for i, bd in enumerate(_require(sd, "blocks", path)))
        stages.append(StageSpec(width=int(_require(sd, "width", path)),
                                blocks=blocks,
                                downsample=bool(sd.get("downsample", j > 0))))
    spec = ArchSpec(stem_mid=int(_require(doc, "stem_mid", "$")),
                    stages=tuple(stages),
                    classes=int(_require(doc, "classes", "$")),
                    resolution=int(_require(doc, "resolution", "$")))
    return spec


def save(spec: ArchSpec, path) -> None:
    with open(path, "w") as f:
        f.write(to_json(spec))


def load(path) -> ArchSpec:
    with open(path) as f:
        return from_json(f.read())
