"""Latency lookup table: per-block benchmarking on the host CPU, a
deterministic synthetic cost model for hermetic tests, CSV persistence, and
whole-network estimation by summation.

Keys are (kind, width, resolution, exp) with kind one of Stem / Embed /
MB4D / MB3D / Head. Resolution is the spatial side length at which the block
runs (input side for Stem, output side for Embed). Estimation requires exact
key matches; there is no interpolation.
"""

from __future__ import annotations

import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import arch as arch_mod
from .arch import (DEFAULT_D_QK, DEFAULT_D_V, DEFAULT_HEADS, ArchSpec,
                   Mb3dSpec, Mb4dSpec)
from .blocks import Downsample, Head, Mb3d, Mb4d, Stem, to_tokens
from .errors import TableError
from .tensor import Tensor, no_grad

KINDS = ("Stem", "Embed", "MB4D", "MB3D", "Head")

Key = Tuple[str, int, int, int]  # (kind, width, resolution, exp)


@dataclass(frozen=True)
class Entry:
    median_s: float
    mad_s: float
    samples: int


@dataclass
class LatencyTable:
    entries: Dict[Key, Entry] = field(default_factory=dict)
    fingerprint: str = ""

    def add(self, key: Key, entry: Entry) -> None:
        if key in self.entries:
            raise TableError(f"duplicate table key {key}")
        if key[1] % 16 != 0 or key[1] < 16:
            raise TableError(f"key width {key[1]} is not a positive multiple of 16")
        if entry.median_s <= 0:
            raise TableError(f"non-positive median for key {key}")
        self.entries[key] = entry

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BenchConfig:
    warmup_iters: int = 5
    measure_iters: int = 30
    batch: int = 1
    repeat_sets: int = 1
    heads: int = DEFAULT_HEADS
    d_qk: int = DEFAULT_D_QK
    d_v: int = DEFAULT_D_V
    classes: int = 10

    def __post_init__(self):
        if self.measure_iters < 1 or self.warmup_iters < 0:
            raise ValueError("benchmark iteration counts must be positive")


def host_fingerprint() -> str:
    return f"{platform.machine()}-{platform.system()}-np{np.__version__}"


def _build_block(kind: str, width: int, resolution: int, exp: int, cfg: BenchConfig,
                 rng: np.random.Generator):
    """Return (callable, input array shape) for one benchmark subject."""
    if kind == "MB4D":
        blk = Mb4d(width, exp, rng=rng)
        blk.fold()  # inference path runs with BN folded
        return (lambda x: blk(x)), (cfg.batch, width, resolution, resolution)
    if kind == "MB3D":
        n = resolution * resolution
        blk = Mb3d(width, cfg.heads, cfg.d_qk, cfg.d_v, exp, n, rng=rng)
        return (lambda x: blk(x)), (cfg.batch, n, width)
    if kind == "Stem":
        stem = Stem(max(width // 2, 1), width, rng=rng)
        stem.fold()
        return (lambda x: stem(x)), (cfg.batch, 3, resolution, resolution)
    if kind == "Embed":
        ds = Downsample(max(width // 2, 16), width, rng=rng)
        ds.fold()
        return (lambda x: ds(x)), (cfg.batch, max(width // 2, 16), 2 * resolution, 2 * resolution)
    if kind == "Head":
        head = Head(width, cfg.classes, rng=rng)
        return (lambda x: head(x)), (cfg.batch, width, resolution, resolution)
    raise TableError(f"unknown block kind {kind!r}; expected one of {KINDS}")


def benchmark_block(kind: str, width: int, resolution: int, exp: int,
                    cfg: BenchConfig, seed: int = 0) -> Entry:
    """Median/MAD wall time of one block forward, single-threaded, inference."""
    if width % 16 != 0:
        raise TableError(f"width {width} is not a multiple of 16")
    if resolution < 1:
        raise TableError(f"resolution must be >= 1, got {resolution}")
    rng = np.random.default_rng(seed)
    fn, shape = _build_block(kind, width, resolution, exp, cfg, rng)
    x = Tensor(rng.standard_normal(shape).astype(np.float32))
    with no_grad():
        for _ in range(cfg.warmup_iters):
            fn(x)
        times: List[float] = []
        for _ in range(cfg.repeat_sets * cfg.measure_iters):
            t0 = time.perf_counter_ns()
            fn(x)
            times.append((time.perf_counter_ns() - t0) * 1e-9)
    med = statistics.median(times)
    mad = statistics.median(abs(t - med) for t in times)
    resolution_floor = 1e-7  # ~100ns: coarse-timer flag threshold
    if med < resolution_floor:
        warnings.warn(f"timer resolution is coarse relative to median {med:.3g}s for {kind}")
    return Entry(median_s=med, mad_s=mad, samples=len(times))


# ---- synthetic cost model ------------------------------------------------------

_SYNTH_BASE = {"Stem": 1.5e-5, "Embed": 1.0e-5, "MB4D": 2.0e-5, "MB3D": 3.0e-5, "Head": 5.0e-6}
_SYNTH_PER_MAC = 1.0e-9


def key_macs(kind: str, width: int, resolution: int, exp: int, cfg: BenchConfig) -> int:
    """Analytic MAC count of one table key; basis of the synthetic model."""
    if kind == "MB4D":
        return arch_mod.block_macs(Mb4dSpec(width, exp), resolution)
    if kind == "MB3D":
        return arch_mod.block_macs(
            Mb3dSpec(width, cfg.heads, cfg.d_qk, cfg.d_v, exp), resolution)
    if kind == "Stem":
        mid = max(width // 2, 1)
        return 3 * mid * 9 * (resolution // 2) ** 2 + mid * width * 9 * (resolution // 4) ** 2
    if kind == "Embed":
        return max(width // 2, 16) * width * 9 * resolution * resolution
    if kind == "Head":
        return width * cfg.classes
    raise TableError(f"unknown block kind {kind!r}")


def synthetic_entry(kind: str, width: int, resolution: int, exp: int,
                    cfg: Optional[BenchConfig] = None) -> Entry:
    cfg = cfg or BenchConfig()
    macs = key_macs(kind, width, resolution, exp, cfg)
    return Entry(median_s=_SYNTH_BASE[kind] + _SYNTH_PER_MAC * macs, mad_s=0.0, samples=0)


# ---- table construction --------------------------------------------------------


def build_table(widths: Iterable[int], kinds: Iterable[str], resolutions: Iterable[int],
                cfg: Optional[BenchConfig] = None, synthetic: bool = False,
                exp: int = 4, seed: int = 0) -> LatencyTable:
    """Benchmark (or synthesize) the cartesian grid of keys."""
    widths, kinds, resolutions = list(widths), list(kinds), list(resolutions)
    if not widths or not kinds or not resolutions:
        raise TableError("width, kind, and resolution grids must all be non-empty")
    for k in kinds:
        if k not in KINDS:
            raise TableError(f"unknown block kind {k!r}; expected one of {KINDS}")
    cfg = cfg or BenchConfig()
    table = LatencyTable(fingerprint="synthetic" if synthetic else host_fingerprint())
    errors: List[str] = []
    for kind in kinds:
        for w in widths:
            for r in resolutions:
                key = (kind, w, r, exp)
                try:
                    e = synthetic_entry(kind, w, r, exp, cfg) if synthetic \
                        else benchmark_block(kind, w, r, exp, cfg, seed)
                    table.add(key, e)
                except TableError as exc:
                    errors.append(f"{key}: {exc}")
    if errors and not table.entries:
        raise TableError("no entries could be benchmarked: " + "; ".join(errors))
    if errors:
        warnings.warn(f"{len(errors)} grid entries failed: " + "; ".join(errors))
    return table


def table_for_skeleton(sk, cfg: Optional[BenchConfig] = None, synthetic: bool = False,
                       exp: Optional[int] = None, seed: int = 0) -> LatencyTable:
    """Table covering every key reachable by slimming a supernet skeleton:
    all stage widths down to 16 in steps of 16, at each stage's resolution."""
    cfg = cfg or BenchConfig(classes=sk.classes)
    exp = exp if exp is not None else sk.exp
    table = LatencyTable(fingerprint="synthetic" if synthetic else host_fingerprint())
    seen = set()
    for j in range(4):
        res = sk.stage_resolution(j)
        widths = range(16, sk.widths[j] + 1, 16)
        kinds = ["MB4D", "MB3D"] if j >= 2 else ["MB4D"]
        for w in widths:
            for kind in kinds:
                _add_unique(table, seen, (kind, w, res, exp), cfg, synthetic, seed)
            if j == 0:
                _add_unique(table, seen, ("Stem", w, sk.resolution, 0), cfg, synthetic, seed)
            else:
                _add_unique(table, seen, ("Embed", w, res, 0), cfg, synthetic, seed)
            if j == 3:
                _add_unique(table, seen, ("Head", w, res, 0), cfg, synthetic, seed)
    return table


def _add_unique(table, seen, key, cfg, synthetic, seed):
    if key in seen:
        return
    seen.add(key)
    kind, w, r, exp = key
    e = synthetic_entry(kind, w, r, exp, cfg) if synthetic \
        else benchmark_block(kind, w, r, exp, cfg, seed)
    table.add(key, e)


# ---- estimation ----------------------------------------------------------------


def spec_keys(spec: ArchSpec) -> List[Key]:
    """Table keys a spec's stem, embeddings, blocks, and head resolve to."""
    keys: List[Key] = [("Stem", spec.stages[0].width, spec.resolution, 0)]
    for j, stage in enumerate(spec.stages):
        res = spec.stage_resolution(j)
        if stage.downsample:
            keys.append(("Embed", stage.width, res, 0))
        for b in stage.blocks:
            if b.kind == "mb4d":
                keys.append(("MB4D", b.width, res, b.exp))
            elif b.kind == "mb3d":
                keys.append(("MB3D", b.width, res, b.exp))
    keys.append(("Head", spec.stages[3].width, spec.stage_resolution(3), 0))
    return keys


def estimate_latency(spec: ArchSpec, table: LatencyTable) -> float:
    """Sum of table medians over the spec's components; exact key match only."""
    keys = spec_keys(spec)
    missing = [k for k in keys if k not in table.entries]
    if missing:
        raise TableError(f"latency table is missing {len(missing)} keys: {missing}")
    return float(sum(table.entries[k].median_s for k in keys))


# ---- CSV persistence -----------------------------------------------------------

CSV_HEADER = "kind,width,resolution,exp,median_s,mad_s,samples,fingerprint"


def save_csv(table: LatencyTable, path) -> None:
    lines = [CSV_HEADER]
    for (kind, w, r, exp), e in sorted(table.entries.items()):
        lines.append(f"{kind},{w},{r},{exp},{e.median_s!r},{e.mad_s!r},{e.samples},{table.fingerprint}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_csv(path) -> LatencyTable:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise TableError(f"{path}: missing or malformed header row")
    table = LatencyTable()
    fingerprints = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise TableError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            key = (parts[0], int(parts[1]), int(parts[2]), int(parts[3]))
            entry = Entry(float(parts[4]), float(parts[5]), int(parts[6]))
        except ValueError as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from exc
        table.add(key, entry)
        fingerprints.add(parts[7])
    table.fingerprint = fingerprints.pop() if len(fingerprints) == 1 else ",".join(sorted(fingerprints))
    if table.fingerprint not in ("synthetic", host_fingerprint()):
        warnings.warn(f"latency table fingerprint {table.fingerprint!r} does not match "
                      f"this host ({host_fingerprint()!r}); estimates may not transfer")
    return table
