"""Greedy latency-driven slimming.

State is a triple (keep flags per slot, number of late-stage 3D blocks,
stage widths). Three candidate actions per step:

  DR  remove the least-important kept slot,
  WR  shrink the least-important stage's width by 16,
  MR  remove the earliest 3D block.

Each is scored by accuracy drop per second of latency saved (lookup-table
estimate); the smallest score wins. The loop runs until the estimate meets
the target budget, every step strictly decreasing the estimate.

Kept late-stage slots are materialized with the 3D kind assigned to the last
``n3`` of them, so derived specs are always dimension consistent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arch import ArchSpec
from .errors import TableError, VitslimError
from .latency import LatencyTable, estimate_latency
from .supernet import GumbelConfig, SuperNet, path_importance
from .tensor import Tensor, no_grad

ACTION_ORDER = ("DR", "WR", "MR")  # deterministic tie-break order


@dataclass(frozen=True)
class SlimAction:
    kind: str              # "DR" | "WR" | "MR"
    stage: int             # 0-based stage of the affected slot / stage
    index: int = -1        # slot index within the supernet path list (DR/MR)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stage": self.stage + 1, "index": self.index}


@dataclass(frozen=True)
class SlimConfig:
    target_latency_s: float
    max_iters: int = 200
    eval_tau: float = 0.1

    def __post_init__(self):
        if self.target_latency_s <= 0:
            raise ValueError(f"target latency must be positive, got {self.target_latency_s}")


@dataclass(frozen=True)
class SlimState:
    keep: Tuple[bool, ...]
    n3: int
    widths: Tuple[int, int, int, int]


@dataclass
class SlimResult:
    spec: ArchSpec
    trace: List[dict]
    reached: bool
    message: str
    initial_estimate_s: float
    final_estimate_s: float


def initial_state(sn: SuperNet) -> SlimState:
    keep, n3 = sn._default_choices()
    return SlimState(keep=tuple(keep), n3=n3, widths=tuple(sn.skeleton.widths))


def full_state(sn: SuperNet) -> SlimState:
    """All slots kept; every late slot that has a 3D candidate counts it as 4D
    except none -- i.e. the maximal all-4D+3D skeleton uses alpha defaults."""
    keep = tuple(True for _ in sn.paths)
    n3 = sum(1 for p in sn.paths if "3d" in p.kinds and
             p.kinds[int(np.argmax(np.logaddexp(0.0, p.alpha.data)))] == "3d")
    return SlimState(keep=keep, n3=n3, widths=tuple(sn.skeleton.widths))


def derive_spec(sn: SuperNet, state: SlimState, classes: Optional[int] = None) -> ArchSpec:
    return sn.derive_arch(keep=list(state.keep), last_n_3d=state.n3,
                          stage_widths=state.widths, classes=classes)


def slot_assignment(sn: SuperNet, state: SlimState) -> List[str]:
    """Per-slot kind after last-n3 normalization: '4d', '3d', or 'id'."""
    late_kept = sum(1 for p, k in zip(sn.paths, state.keep) if k and p.stage >= 2)
    out: List[str] = []
    late_rank = 0
    for p, k in zip(sn.paths, state.keep):
        if not k:
            out.append("id")
        elif p.stage < 2:
            out.append("4d")
        else:
            late_rank += 1
            out.append("3d" if late_rank > late_kept - state.n3 else "4d")
    return out


def path_importances(sn: SuperNet, state: SlimState) -> List[Optional[float]]:
    """Importance per slot; None for slots already reduced to identity."""
    return [path_importance(p.alpha.data, p.kinds) if k else None
            for p, k in zip(sn.paths, state.keep)]


def stage_importances(sn: SuperNet, state: SlimState) -> List[float]:
    sums = [0.0] * 4
    for p, imp in zip(sn.paths, path_importances(sn, state)):
        if imp is not None:
            sums[p.stage] += imp
    return sums


def candidate_actions(sn: SuperNet, state: SlimState) -> List[SlimAction]:
    """Up to three actions; inapplicable ones omitted. Ties break on the
    lowest stage, then the lowest slot index."""
    actions: List[SlimAction] = []
    imps = path_importances(sn, state)
    kept = [(imp, sn.paths[i].stage, sn.paths[i].index, i)
            for i, imp in enumerate(imps) if imp is not None]
    if kept:
        _, stage, _, idx = min(kept, key=lambda t: (t[0], t[1], t[2]))
        actions.append(SlimAction("DR", stage, idx))
    sums = stage_importances(sn, state)
    shrinkable = [(sums[j], j) for j in range(4) if state.widths[j] > 16]
    if shrinkable:
        _, j = min(shrinkable)
        actions.append(SlimAction("WR", j))
    if state.n3 > 0:
        assign = slot_assignment(sn, state)
        first_3d = assign.index("3d")
        actions.append(SlimAction("MR", sn.paths[first_3d].stage, first_3d))
    return actions


def apply_action(sn: SuperNet, state: SlimState, action: SlimAction) -> SlimState:
    if action.kind == "WR":
        if state.widths[action.stage] <= 16:
            raise VitslimError(f"stage {action.stage + 1} already at the minimum width")
        widths = list(state.widths)
        widths[action.stage] -= 16
        return replace(state, widths=tuple(widths))
    if action.kind in ("DR", "MR"):
        if not state.keep[action.index]:
            raise VitslimError(f"slot {action.index} is already identity")
        assign = slot_assignment(sn, state)
        keep = list(state.keep)
        keep[action.index] = False
        n3 = state.n3 - 1 if assign[action.index] == "3d" else state.n3
        return replace(state, keep=tuple(keep), n3=n3)
    raise VitslimError(f"unknown action kind {action.kind!r}")


def score_action(drop: float, latency_saved_s: float) -> float:
    """Per-latency accuracy drop; the chosen action is the argmin."""
    if latency_saved_s <= 0:
        raise VitslimError(f"action saves no latency ({latency_saved_s} s); exclude it")
    return drop / latency_saved_s


# ---- accuracy-drop evaluation --------------------------------------------------


class SupernetEvaluator:
    """Accuracy proxy on the shared-weight supernet, noise-free at a fixed
    low temperature. Removed slots are forced one-hot at identity; width
    reductions mask the stage's lowest-L1-norm channels."""

    def __init__(self, sn: SuperNet, batches: Sequence[Tuple[np.ndarray, np.ndarray]],
                 tau: float = 0.1):
        if not batches:
            raise VitslimError("evaluation set is empty")
        self.sn = sn
        self.batches = list(batches)
        self.cfg = GumbelConfig(tau=tau, noise=False)
        self._cache: Dict[SlimState, float] = {}

    def _forced_weights(self, state: SlimState) -> Dict[int, np.ndarray]:
        forced = {}
        for i, (p, kind) in enumerate(zip(self.sn.paths, slot_assignment(self.sn, state))):
            w = np.zeros(len(p.kinds), dtype=np.float32)
            w[p.kinds.index(kind)] = 1.0
            forced[i] = w
        return forced

    def _stage_masks(self, state: SlimState) -> Dict[int, np.ndarray]:
        masks = {}
        sk = self.sn.skeleton
        for j in range(4):
            full = sk.widths[j]
            if state.widths[j] >= full:
                continue
            conv = (self.sn.stem.conv2.conv if j == 0
                    else self.sn.downsamples[j].conv.conv)
            norms = np.abs(conv.weight.data).sum(axis=(1, 2, 3))
            order = np.argsort(norms, kind="stable")
            mask = np.ones(full, dtype=np.float32)
            mask[order[: full - state.widths[j]]] = 0.0
            masks[j] = mask
        return masks

    def accuracy(self, state: SlimState) -> float:
        if state in self._cache:
            return self._cache[state]
        forced = self._forced_weights(state)
        masks = self._stage_masks(state)
        correct = total = 0
        with no_grad():
            for x, y in self.batches:
                logits = self.sn.sample_forward(Tensor(x), self.cfg, rng=None,
                                                forced_weights=forced, stage_masks=masks)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                total += len(y)
        acc = correct / total
        self._cache[state] = acc
        return acc

    def drop(self, before: SlimState, after: SlimState) -> float:
        return self.accuracy(before) - self.accuracy(after)


def eval_accuracy_drop(sn: SuperNet, state: SlimState, action: SlimAction,
                       batches: Sequence[Tuple[np.ndarray, np.ndarray]],
                       tau: float = 0.1) -> float:
    """Baseline accuracy minus accuracy with the action simulated."""
    ev = SupernetEvaluator(sn, batches, tau)
    return ev.drop(state, apply_action(sn, state, action))


DropFn = Callable[[SlimState, SlimState], float]


# ---- the greedy loop -----------------------------------------------------------


def slim(sn: SuperNet, table: LatencyTable, cfg: SlimConfig,
         drop_fn: Optional[DropFn] = None,
         eval_batches: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
         start_state: Optional[SlimState] = None,
         acc_fn: Optional[Callable[[SlimState], float]] = None) -> SlimResult:
    """Iterate importance -> candidates -> evaluate -> score -> execute until
    the latency estimate meets the budget. Deterministic for a fixed
    supernet, table, and drop function."""
    if drop_fn is None:
        if eval_batches is None:
            raise VitslimError("slim needs either eval batches or an explicit drop function")
        evaluator = SupernetEvaluator(sn, eval_batches, cfg.eval_tau)
        drop_fn = evaluator.drop
        acc_fn = evaluator.accuracy

    state = start_state if start_state is not None else initial_state(sn)
    est = estimate_latency(derive_spec(sn, state), table)
    initial_est = est
    trace: List[dict] = []
    message = "target reached"
    reached = True

    for it in range(cfg.max_iters):
        if est <= cfg.target_latency_s:
            break
        scored = []
        for action in candidate_actions(sn, state):
            after = apply_action(sn, state, action)
            saved = est - estimate_latency(derive_spec(sn, after), table)
            if saved <= 0:
                continue  # action frees no latency; excluded by contract
            drop = drop_fn(state, after)
            scored.append((score_action(drop, saved), ACTION_ORDER.index(action.kind),
                           action, after, saved, drop))
        if not scored:
            reached = False
            message = (f"no applicable latency-reducing action at estimate {est:.6g}s; "
                       f"minimal network above target {cfg.target_latency_s:.6g}s")
            break
        score, _, action, after, saved, drop = min(scored, key=lambda t: (t[0], t[1]))
        est_after = est - saved
        imps = path_importances(sn, state)
        trace.append({
            "iter": it,
            "action": action.to_dict(),
            "importance": [None if v is None else round(v, 9) for v in imps],
            "stage_importance": [round(v, 9) for v in stage_importances(sn, state)],
            "est_latency_before_s": est,
            "est_latency_after_s": est_after,
            "acc_before": None if acc_fn is None else acc_fn(state),
            "acc_after": None if acc_fn is None else acc_fn(after),
            "accuracy_drop": drop,
            "latency_saved_s": saved,
            "score_per_s": score,
            "widths": list(after.widths),
        })
        state = after
        est = est_after
    else:
        if est > cfg.target_latency_s:
            reached = False
            message = f"max_iters={cfg.max_iters} reached with estimate {est:.6g}s above target"

    if est > cfg.target_latency_s and reached:
        reached = False
        message = message if message != "target reached" else "loop exited above target"

    spec = derive_spec(sn, state)
    return SlimResult(spec=spec, trace=trace, reached=reached, message=message,
                      initial_estimate_s=initial_est, final_estimate_s=est)


def trace_to_jsonl(trace: List[dict]) -> str:
    return "".join(json.dumps(step, sort_keys=True) + "\n" for step in trace)


def trace_to_text(trace: List[dict]) -> str:
    lines = [f"{'step':>4}  {'action':<18} {'before_ms':>10} {'after_ms':>10} "
             f"{'saved_ms':>9} {'drop':>9} {'score':>12}"]
    for s in trace:
        a = s["action"]
        name = f"{a['kind']} s{a['stage']}" + (f" i{a['index']}" if a["index"] >= 0 else "")
        lines.append(f"{s['iter']:>4}  {name:<18} {s['est_latency_before_s'] * 1e3:>10.4f} "
                     f"{s['est_latency_after_s'] * 1e3:>10.4f} {s['latency_saved_s'] * 1e3:>9.4f} "
                     f"{s['accuracy_drop']:>9.4f} {s['score_per_s']:>12.4f}")
    return "\n".join(lines) + "\n"
