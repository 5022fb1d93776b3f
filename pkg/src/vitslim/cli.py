"""Command-line surface.

Subcommands: ``arch`` (show / validate / count), ``lut`` (build / show),
``search`` (train-supernet / slim), ``train``, ``eval``.

Contract: exit 0 on success, 1 on a domain failure, 2 on a usage error.
Every run with an output directory records its resolved configuration there
as JSON; report paths also render figures next to the delimited output.
Commands are deterministic given --seed and the --synthetic cost model.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import arch as arch_mod
from . import data as data_mod
from . import latency, plots, slimming, train as train_mod
from .errors import VitslimError
from .model import Model
from .supernet import SuperNet, toy_skeleton
from .tensor import Tensor, no_grad

KIND_LABEL = {"mb4d": "MB4D", "mb3d": "MB3D", "identity": "Identity"}


# ---- helpers -------------------------------------------------------------------


def _load_config_file(path: str) -> Dict[str, object]:
    """Flat key=value file; values parse as JSON when possible, else strings."""
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VitslimError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        try:
            out[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            out[key.strip()] = value.strip()
    return out


def _resolved(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _record_config(out_dir: Path, command: str, resolved: Dict[str, object]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command,
               "config": {k: (str(v) if isinstance(v, Path) else v)
                          for k, v in resolved.items()}}
    (out_dir / "run-config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit(text: str, out_path: Optional[Path]) -> None:
    print(text)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")


def _load_spec(args) -> arch_mod.ArchSpec:
    if getattr(args, "preset", None):
        if args.preset == "toy":
            return arch_mod.toy_arch(resolution=args.resolution or 64)
        return arch_mod.preset(args.preset, resolution=args.resolution or 224)
    if getattr(args, "spec", None):
        return arch_mod.load(args.spec)
    raise VitslimError("provide --preset or a spec file path")


def _splits(args, seed: int) -> Dict[str, data_mod.Split]:
    dspec = data_mod.DatasetSpec(classes=args.classes, resolution=args.data_resolution,
                                 train=args.train_samples, val=args.val_samples,
                                 test=args.test_samples, seed=seed)
    if getattr(args, "data", None):
        path = Path(args.data)
        if path.exists():
            return data_mod.load_cache(path)
        splits = data_mod.gen_synthetic(dspec)
        path.parent.mkdir(parents=True, exist_ok=True)
        data_mod.save_cache(path, splits)
        return splits
    return data_mod.gen_synthetic(dspec)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset cache path (created if missing)")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--data-resolution", type=int, default=64)
    p.add_argument("--train-samples", type=int, default=512)
    p.add_argument("--val-samples", type=int, default=128)
    p.add_argument("--test-samples", type=int, default=128)


# ---- arch ----------------------------------------------------------------------


def _stage_lines(spec: arch_mod.ArchSpec) -> List[str]:
    lines = [f"stem: 3 -> {spec.stem_mid} -> {spec.stages[0].width} (stride 4)"]
    for j, stage in enumerate(spec.stages):
        res = spec.stage_resolution(j)
        runs: List[str] = []
        for b in stage.blocks:
            label = KIND_LABEL[b.kind]
            if runs and runs[-1].startswith(label + " "):
                head, _, count = runs[-1].partition(" ×")
                runs[-1] = f"{label} ×{int(count) + 1}"
            else:
                runs.append(f"{label} ×1")
        body = ", ".join(runs) if runs else "(empty)"
        lines.append(f"stage {j + 1}: width {stage.width:>4}  res {res:>3}  {body}")
    lines.append(f"head: {spec.stages[3].width} -> {spec.classes}")
    return lines


def cmd_arch(args) -> int:
    out_path = Path(args.out) if args.out else None
    if args.subcmd == "validate":
        spec = arch_mod.load(args.spec) if args.spec else _load_spec(args)
        violations = arch_mod.validate(spec)
        if violations:
            _emit("\n".join(["INVALID"] + [f"  - {v}" for v in violations]), out_path)
            return 1
        _emit("OK", out_path)
        return 0
    spec = _load_spec(args)
    if args.subcmd == "show":
        _emit("\n".join(_stage_lines(spec)), out_path)
        return 0
    # count
    params = arch_mod.count_params(spec)
    macs = arch_mod.count_macs(spec)
    lines = [f"params: {params} ({params / 1e6:.2f}M)",
             f"macs:   {macs} ({macs / 1e9:.3f}G)"]
    for j, stage in enumerate(spec.stages):
        res = spec.stage_resolution(j)
        p = sum(arch_mod.block_params(b, res * res) for b in stage.blocks)
        m = sum(arch_mod.block_macs(b, res) for b in stage.blocks)
        lines.append(f"stage {j + 1}: params {p} macs {m}")
    _emit("\n".join(lines), out_path)
    return 0


# ---- lut -----------------------------------------------------------------------


def cmd_lut(args) -> int:
    if args.subcmd == "show":
        table = latency.load_csv(args.lut)
        print(f"fingerprint: {table.fingerprint}")
        print(f"entries: {len(table)}")
        print(latency.CSV_HEADER)
        for (kind, w, r, exp), e in sorted(table.entries.items()):
            print(f"{kind},{w},{r},{exp},{e.median_s!r},{e.mad_s!r},{e.samples},{table.fingerprint}")
        return 0
    # build
    if not args.synthetic:
        threads = os.environ.get("OMP_NUM_THREADS")
        if threads != "1":
            print("warning: set OMP_NUM_THREADS=1 for stable block timings", file=sys.stderr)
    widths = [int(w) for w in args.widths.split(",")]
    kinds = args.kinds.split(",")
    resolutions = [int(r) for r in args.resolutions.split(",")]
    cfg = latency.BenchConfig(warmup_iters=args.warmup, measure_iters=args.iters)
    table = latency.build_table(widths, kinds, resolutions, cfg,
                                synthetic=args.synthetic, exp=args.exp, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    latency.save_csv(table, out)
    fig = plots.plot_table(table, out.with_suffix(".png"))
    print(f"wrote {len(table)} entries to {out}")
    print(f"figure: {fig}")
    return 0


# ---- search --------------------------------------------------------------------


def cmd_search(args) -> int:
    out_dir = Path(args.out)
    if args.subcmd == "train-supernet":
        splits = _splits(args, args.seed)
        sk = toy_skeleton(classes=args.classes, resolution=args.data_resolution)
        sn = SuperNet(sk, seed=args.seed)
        metrics = train_mod.train_supernet(sn, splits, epochs=args.epochs,
                                           batch=args.batch, seed=args.seed,
                                           checkpoint_dir=out_dir)
        train_mod.write_metrics_csv(out_dir / "metrics.csv", metrics)
        plots.plot_metrics(metrics, out_dir / "metrics.png")
        print(f"final epoch loss {metrics[-1].loss:.4f} top1 {metrics[-1].top1:.4f}")
        print(f"checkpoint: {out_dir / 'supernet-last.ckpt'}")
        return 0

    # slim
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.supernet:
        sn = train_mod.load_supernet(args.supernet)
    else:
        sn = SuperNet(toy_skeleton(classes=args.classes, resolution=args.data_resolution),
                      seed=args.seed)
    if args.lut:
        table = latency.load_csv(args.lut)
    else:
        table = latency.table_for_skeleton(sn.skeleton, synthetic=args.synthetic,
                                           seed=args.seed)
        latency.save_csv(table, out_dir / "lut.csv")
    splits = _splits(args, args.seed)
    batches = list(data_mod.batches(splits["val"], args.batch))
    cfg = slimming.SlimConfig(target_latency_s=args.target_ms * 1e-3,
                              max_iters=args.max_iters)
    result = slimming.slim(sn, table, cfg, eval_batches=batches)
    arch_mod.save(result.spec, out_dir / "arch.json")
    (out_dir / "trace.jsonl").write_text(slimming.trace_to_jsonl(result.trace))
    (out_dir / "trace.txt").write_text(slimming.trace_to_text(result.trace))
    plots.plot_slim_trace(result.trace, cfg.target_latency_s, out_dir / "trace.png")
    summary = {"reached": result.reached, "message": result.message,
               "initial_estimate_s": result.initial_estimate_s,
               "final_estimate_s": result.final_estimate_s,
               "steps": len(result.trace)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"spec: {out_dir / 'arch.json'}")
    print(f"trace: {out_dir / 'trace.jsonl'}")
    print(f"estimate {result.initial_estimate_s * 1e3:.4f} ms -> "
          f"{result.final_estimate_s * 1e3:.4f} ms "
          f"(target {args.target_ms:.4f} ms, {len(result.trace)} steps)")
    if not result.reached:
        print(f"target not reached: {result.message}", file=sys.stderr)
        return 1
    return 0


# ---- train / eval --------------------------------------------------------------


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = _load_spec(args)
    splits = _splits(args, args.seed)
    model = Model(spec, seed=args.seed)
    metrics = train_mod.train_final(model, splits, epochs=args.epochs,
                                    batch=args.batch, seed=args.seed)
    train_mod.save_model(out_dir / "model.ckpt", model)
    train_mod.write_metrics_csv(out_dir / "metrics.csv", metrics)
    plots.plot_metrics(metrics, out_dir / "metrics.png")
    val_top1 = train_mod.evaluate(model, splits["val"], args.batch)
    print(f"final epoch loss {metrics[-1].loss:.4f} train-top1 {metrics[-1].top1:.4f}")
    print(f"val top1: {val_top1:.4f}")
    print(f"model: {out_dir / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    if args.model:
        model = train_mod.load_model(args.model)
    else:
        model = Model(_load_spec(args), seed=args.seed)
    splits = _splits(args, args.seed)
    split = splits[args.split]
    t0 = time.perf_counter()
    top1 = train_mod.evaluate(model, split, args.batch)
    dt = time.perf_counter() - t0
    print(f"{args.split} top1: {top1:.4f} ({len(split[1])} samples, {dt:.2f}s)")
    return 0


# ---- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitslim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="flat key=value config file; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    p_arch = sub.add_parser("arch", help="inspect and validate architecture descriptions")
    p_arch.add_argument("subcmd", choices=["show", "validate", "count"])
    p_arch.add_argument("spec", nargs="?", help="architecture JSON path")
    p_arch.add_argument("--preset", choices=["L1", "L3", "L7", "toy"])
    p_arch.add_argument("--resolution", type=int)
    p_arch.add_argument("--out", help="also write the report to this file")
    p_arch.set_defaults(func=cmd_arch)

    p_lut = sub.add_parser("lut", help="build or inspect latency lookup tables")
    p_lut.add_argument("subcmd", choices=["build", "show"])
    p_lut.add_argument("--lut", help="table CSV to show")
    p_lut.add_argument("--out", help="output CSV path (build)")
    p_lut.add_argument("--widths", default="16,32,48,64")
    p_lut.add_argument("--kinds", default="MB4D,MB3D")
    p_lut.add_argument("--resolutions", default="16,8")
    p_lut.add_argument("--exp", type=int, default=4)
    p_lut.add_argument("--warmup", type=int, default=5)
    p_lut.add_argument("--iters", type=int, default=30)
    p_lut.add_argument("--synthetic", action="store_true",
                       help="deterministic cost model instead of host timings")
    p_lut.add_argument("--seed", type=int, default=0)
    p_lut.set_defaults(func=cmd_lut)

    p_search = sub.add_parser("search", help="supernet training and latency-driven slimming")
    p_search.add_argument("subcmd", choices=["train-supernet", "slim"])
    p_search.add_argument("--out", required=True, help="output directory")
    p_search.add_argument("--supernet", help="supernet checkpoint (slim)")
    p_search.add_argument("--lut", help="latency table CSV (slim)")
    p_search.add_argument("--target-ms", type=float, default=1.0)
    p_search.add_argument("--max-iters", type=int, default=200)
    p_search.add_argument("--epochs", type=int, default=10)
    p_search.add_argument("--batch", type=int, default=32)
    p_search.add_argument("--synthetic", action="store_true")
    p_search.add_argument("--seed", type=int, default=0)
    _add_data_flags(p_search)
    p_search.set_defaults(func=cmd_search)

    p_train = sub.add_parser("train", help="train a concrete model")
    p_train.add_argument("--arch", dest="spec", help="architecture JSON path")
    p_train.add_argument("--preset", choices=["L1", "L3", "L7", "toy"])
    p_train.add_argument("--resolution", type=int)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--epochs", type=int, default=20)
    p_train.add_argument("--batch", type=int, default=32)
    p_train.add_argument("--seed", type=int, default=0)
    _add_data_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a model on a split")
    p_eval.add_argument("--model", help="model checkpoint path")
    p_eval.add_argument("--arch", dest="spec", help="architecture JSON (fresh weights)")
    p_eval.add_argument("--preset", choices=["L1", "L3", "L7", "toy"])
    p_eval.add_argument("--resolution", type=int)
    p_eval.add_argument("--split", choices=["train", "val", "test"], default="test")
    p_eval.add_argument("--batch", type=int, default=32)
    p_eval.add_argument("--seed", type=int, default=0)
    _add_data_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            # re-parse with the file's values as defaults so explicit flags win
            file_values = {k.replace("-", "_"): v
                           for k, v in _load_config_file(args.config).items()}
            reparser = build_parser()
            for action in reparser._subparsers._group_actions[0].choices.values():
                action.set_defaults(**{k: v for k, v in file_values.items()
                                       if k in {a.dest for a in action._actions}})
            args = reparser.parse_args(argv)
    except VitslimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "lut" and args.subcmd == "build" and not args.out:
        parser.error("lut build requires --out")  # exits 2
    if args.command == "lut" and args.subcmd == "show" and not args.lut:
        parser.error("lut show requires --lut")
    try:
        if getattr(args, "out", None) and args.command in ("search", "train"):
            _record_config(Path(args.out), f"{args.command} {getattr(args, 'subcmd', '')}".strip(),
                           _resolved(args))
        return args.func(args)
    except VitslimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
