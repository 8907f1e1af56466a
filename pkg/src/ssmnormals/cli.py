"""Command-line entry point: train, predict, eval, baseline, export, bench.

Failures print one JSON line ``{"error": <category>, "message": ...}`` to
stderr. Exit codes: 2 config, 3 dataset missing, 4 numerical abort,
1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import TrainConfig, list_presets, preset_path
from .errors import (ConfigError, ConsistencyError, DatasetMissingError, NumericalAbort, ParseError,
                     UnsupportedModeError, ValidationError)

log = logging.getLogger("ssmnormals")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category, self.code = category, code


# ---------------------------------------------------------------- config plumbing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override --config; --set applies last)")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(defaults, f.name)
        shown = ",".join(map(str, default)) if isinstance(default, list) else default
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="V",
                           help=f"(default: {str(shown).lower() if isinstance(default, bool) else shown})")
    parser.add_argument("--config", help=f"config file or preset name ({', '.join(list_presets())})")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")


def resolve_config(args) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            path = preset_path(args.config)
        config = TrainConfig.from_file(path)
    flagged = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
               if getattr(args, f"cfg_{f.name}", None) is not None}
    if flagged:
        config = TrainConfig.from_mapping(flagged, config)
    return config.with_overrides(args.set)


def config_epilog() -> str:
    lines = ["config keys and defaults:"]
    for key, value in TrainConfig().to_dict().items():
        lines.append(f"  {key} = {value}")
    return "\n".join(lines)


# ---------------------------------------------------------------- dataset helpers

def _split_path(data: Path, split: Optional[str], prefix: str) -> Path:
    if split:
        p = Path(split)
        return p if p.is_file() else data / split
    preferred = data / f"{prefix}_whitenoise.txt"
    if preferred.is_file():
        return preferred
    found = sorted(data.glob(f"{prefix}*.txt"))
    if not found:
        raise DatasetMissingError(f"no {prefix}*.txt split file in {data}; pass --split or --shapes")
    return found[0]


def shape_list(args, prefix: str) -> list[str]:
    from .dataset_io import read_split
    data = Path(args.data)
    if not data.is_dir():
        raise DatasetMissingError(f"dataset directory not found: {data}")
    if getattr(args, "shapes", None):
        return [s for s in args.shapes.split(",") if s]
    return read_split(_split_path(data, args.split, prefix))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    from .dataset_io import SplitManifest
    from .train_eval import train

    config = resolve_config(args)
    data = Path(args.data)
    if not data.is_dir():
        raise DatasetMissingError(f"dataset directory not found: {data}")
    if args.shapes:
        from .dataset_io import variant_from_name
        names = [s for s in args.shapes.split(",") if s]
        manifest = SplitManifest(data, names, [variant_from_name(n) for n in names], config.patches_per_shape)
    else:
        manifest = SplitManifest.from_split_file(data, _split_path(data, args.split, "trainingset"),
                                                 config.patches_per_shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config.dumps(), encoding="utf-8", newline="\n")
    result = train(config, manifest, out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": result.steps,
                      "final_loss": result.losses[-1] if result.losses else None}))
    return EXIT_OK


def _predictor(args):
    from .train_eval import JetBaseline, NetworkPredictor, PCABaseline
    if getattr(args, "checkpoint", None):
        return NetworkPredictor.from_checkpoint(args.checkpoint, args.batch)
    if args.baseline == "pca":
        return PCABaseline(args.k)
    if args.baseline == "jet":
        return JetBaseline(args.k, args.jet_order)
    raise ConfigError("give --checkpoint or --baseline")


def cmd_predict(args) -> int:
    from .dataset_io import write_normals
    from .train_eval import ShapeStore, evaluation_indices

    predictor = _predictor(args)
    store = ShapeStore(args.data)
    out = Path(args.out)
    for name in shape_list(args, "testset"):
        cloud = store.get(name)
        indices = np.arange(len(cloud)) if args.all_points else evaluation_indices(cloud)[0]
        pred = predictor.predict(store, name, indices)
        write_normals(cloud, pred, out / f"{name}.normals", indices)
        log.info("wrote %s (%d normals)", out / f"{name}.normals", len(pred))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train_eval import evaluate

    predictor = _predictor(args)
    report = evaluate(predictor, args.data, shape_list(args, "testset"), args.out,
                      with_cnd=not args.no_cnd,
                      predictions_dir=Path(args.out) / "normals" if args.save_normals else None)
    print(report.rmse_table(), end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .train_eval import JetBaseline, PCABaseline, evaluate

    names = shape_list(args, "testset")
    out = Path(args.out)
    rows = []
    for k in _int_list(args.ks):
        predictor = PCABaseline(k) if args.method == "pca" else JetBaseline(k, args.jet_order)
        report = evaluate(predictor, args.data, names, out / f"{args.method}_k{k}", with_cnd=False)
        rows.append((k, report.average))
    best = min(rows, key=lambda r: r[1])
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["k", "avg_rmse"])
        for k, v in rows:
            w.writerow([k, f"{v:.6f}"])
    (out / "sweep.json").write_text(json.dumps({"method": args.method, "best_k": best[0],
                                                "best_avg_rmse": best[1],
                                                "rows": [{"k": k, "avg_rmse": v} for k, v in rows]},
                                               indent=2) + "\n", encoding="utf-8")
    print(f"best k={best[0]} avg RMSE={best[1]:.2f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .dataset_io import load_normals_file, load_shape, read_indices

    cloud = load_shape(args.data, args.shape)
    normals_path = Path(args.normals)
    if not normals_path.is_file():
        raise DatasetMissingError(f"normals file not found: {normals_path}")
    normals = load_normals_file(normals_path)
    sidecar = normals_path.with_suffix(".pidx")
    if len(normals) == len(cloud):
        points = cloud.points
    elif sidecar.is_file():
        idx = read_indices(sidecar)
        if len(idx) != len(normals):
            raise ConsistencyError(f"{sidecar} lists {len(idx)} indices for {len(normals)} normals")
        points = cloud.points[idx]
    else:
        raise ConsistencyError(f"{len(normals)} normals for {len(cloud)} points and no .pidx sidecar")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = np.hstack([points, normals])
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        if args.format == "ply":
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(rows)}\n")
            for p in ("x", "y", "z", "nx", "ny", "nz"):
                f.write(f"property float {p}\n")
            f.write("end_header\n")
        for r in rows:
            f.write(" ".join(f"{v:.9g}" for v in r) + "\n")
    return EXIT_OK


def _peak_rss_mb(resource) -> float:
    # ru_maxrss survives fork+exec on Linux; VmHWM belongs to this address space only
    try:
        with open("/proc/self/status", encoding="ascii") as f:
            for line in f:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _bench_one(m: int, dim: int, depth: int, repeats: int, seed: int, queue) -> None:
    import resource
    import time

    import torch

    from .pssm import BlockChain, run_chain

    torch.set_num_threads(1)
    try:
        torch.manual_seed(seed)
        chain = BlockChain(dim, depth).eval()
        tokens = torch.randn(1, m, dim)
        best = math.inf
        with torch.no_grad():
            for _ in range(repeats):
                t0 = time.perf_counter()
                run_chain(tokens, chain)
                best = min(best, time.perf_counter() - t0)
        peak = _peak_rss_mb(resource)
        queue.put(("ok", best * 1000.0, peak))
    except (MemoryError, RuntimeError) as exc:
        queue.put(("oom", str(exc), None))


def bench_scaling(lengths: Sequence[int], dim: int = 128, depth: int = 7, repeats: int = 3,
                  seed: int = 0, timeout: float = 600.0) -> tuple[list[dict], Optional[float]]:
    """Time ``run_chain`` forward per token count, each in a fresh process.

    A fresh process gives a per-length peak RSS. On out-of-memory a row with
    status ``oom`` is recorded and longer lengths are skipped.
    """
    import multiprocessing as mp

    lengths = list(lengths)
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ConfigError("bench lengths must be strictly ascending")
    ctx = mp.get_context("spawn")
    rows = []
    for m in lengths:
        queue = ctx.Queue()
        proc = ctx.Process(target=_bench_one, args=(m, dim, depth, repeats, seed, queue))
        proc.start()
        proc.join(timeout)
        result = queue.get() if not queue.empty() else None
        if proc.is_alive():
            proc.kill()
            proc.join()
        if result is None or result[0] != "ok":
            rows.append({"M": m, "wall_ms": None, "peak_mem_mb": None, "status": "oom"})
            log.warning("bench stopped at M=%d (%s)", m, result[1] if result else f"exit {proc.exitcode}")
            break
        rows.append({"M": m, "wall_ms": result[1], "peak_mem_mb": result[2], "status": "ok"})
        log.info("M=%d: %.1f ms, %.0f MB", m, result[1], result[2])
    ok = [r for r in rows if r["status"] == "ok"]
    slope = None
    if len(ok) >= 2:
        slope = float(np.polyfit(np.log([r["M"] for r in ok]), np.log([r["wall_ms"] for r in ok]), 1)[0])
    return rows, slope


def cmd_bench(args) -> int:
    rows, slope = bench_scaling(_int_list(args.lengths), args.dim, args.depth, args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["M", "wall_ms", "peak_mem_mb", "status"])
        for r in rows:
            w.writerow([r["M"], "" if r["wall_ms"] is None else f"{r['wall_ms']:.3f}",
                        "" if r["peak_mem_mb"] is None else f"{r['peak_mem_mb']:.1f}", r["status"]])
    (out / "bench.json").write_text(json.dumps({"rows": rows, "loglog_slope": slope}, indent=2) + "\n",
                                    encoding="utf-8")
    print(f"log-log slope: {slope:.3f}" if slope is not None else "log-log slope: n/a")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmnormals", description="Point cloud normal estimation.",
                                     epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, split_help):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--split", help=split_help)
        p.add_argument("--shapes", help="comma-separated shape names instead of a split file")

    def predictor_args(p):
        p.add_argument("--checkpoint", help="trained network checkpoint")
        p.add_argument("--baseline", choices=("pca", "jet"), help="classical method instead of a network")
        p.add_argument("--k", type=int, default=64, help="baseline neighbourhood size (default: 64)")
        p.add_argument("--jet-order", type=int, default=2, help="jet order (default: 2)")
        p.add_argument("--batch", type=int, default=64, help="network inference batch (default: 64)")

    p = sub.add_parser("train", help="train a network", epilog=config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    data_args(p, "training split file (default: trainingset_whitenoise.txt or first trainingset*.txt)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predicted normals per shape")
    data_args(p, "test split file (default: first testset*.txt)")
    predictor_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--all-points", action="store_true", help="predict every point, not just .pidx ones")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline and write reports")
    data_args(p, "test split file (default: first testset*.txt)")
    predictor_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-cnd", action="store_true", help="skip the clean-neighbour metric")
    p.add_argument("--save-normals", action="store_true", help="also write predicted normals")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="sweep a classical baseline over neighbourhood sizes")
    data_args(p, "test split file (default: first testset*.txt)")
    p.add_argument("--method", choices=("pca", "jet"), default="pca")
    p.add_argument("--ks", default="32,64,128", help="neighbourhood sizes (default: 32,64,128)")
    p.add_argument("--jet-order", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export", help="export points with normals as PLY or xyzn")
    p.add_argument("--data", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--normals", required=True, help="normals file (with .pidx sidecar if partial)")
    p.add_argument("--format", choices=("ply", "xyzn"), default="ply")
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="time the block chain over token counts")
    p.add_argument("--lengths", default="256,512,1024,2048,4096,8192,16384")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def _classify(exc: BaseException) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, ConfigError):
        return CliError("config", EXIT_CONFIG, str(exc))
    if isinstance(exc, DatasetMissingError):
        return CliError("dataset_missing", EXIT_DATA, str(exc))
    if isinstance(exc, NumericalAbort):
        return CliError("numerical", EXIT_NUMERIC, str(exc))
    if isinstance(exc, (ParseError, ConsistencyError, ValidationError)):
        return CliError("data", EXIT_OTHER, str(exc))
    if isinstance(exc, UnsupportedModeError):
        return CliError("unsupported", EXIT_OTHER, str(exc))
    return CliError("internal", EXIT_OTHER, f"{type(exc).__name__}: {exc}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        err = _classify(exc)
        print(json.dumps({"error": err.category, "message": " ".join(str(err).split())}), file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return err.code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
