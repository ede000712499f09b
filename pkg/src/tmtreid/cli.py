"""``tmt`` command line: train, eval, gradcheck, bench, inspect, synth-cubes.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import FormatError, load_cube_dir, read_cube, save_cube_dir, sidecar_path
from .gradcheck import BLOCKS, format_table, run_gradcheck
from .model import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from .numerics import ConfigError, ContractError, DimensionError, NumericError
from .pipeline import (
    RunConfig,
    benchmark_config,
    evaluate_model,
    fit,
    prepare_split,
    write_metrics_csv,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

BENCH_AXES = {
    "T": ("6", "8", "10", "12"),
    "depth_selfview": ("1", "2", "3"),
    "depth_crossview": ("1", "2", "3"),
    "hi_res": ("0", "1"),
    "views": ("spatial", "temporal", "st", "all"),
    "cross_on_off": ("on", "off"),
    "variant": ("baseline", "selfview", "full"),
}
_VIEW_ALIASES = {"st": "spatiotemporal"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config assembly


def load_run_config(args) -> RunConfig:
    """Config file (or the desk benchmark) with command-line overrides applied, validated."""
    seed = args.seed
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
        if seed is not None:
            cfg.train.seed = seed
            cfg.synth.seed = seed
    else:
        cfg = benchmark_config(7 if seed is None else seed)
    overrides = {
        "epochs": ("train", "epochs"),
        "max_steps": (None, "max_steps"),
        "variant": ("model", "variant"),
    }
    for flag, (section, name) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section) if section else cfg, name, value)
    if getattr(args, "T", None) is not None:
        cfg.train.frames = args.T
        cfg.model.frames = args.T
    if getattr(args, "depth_self", None) is not None:
        cfg.model.depth_self = args.depth_self
    if getattr(args, "depth_cross", None) is not None:
        cfg.model.depth_cross = args.depth_cross
    for flag in ("hi_res", "literal_eq5", "literal_eq8", "literal_eq12"):
        if getattr(args, flag, False):
            setattr(cfg.model, flag, True)
    return cfg.check()


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (default: the desk-scale benchmark)")
    p.add_argument("--seed", type=int, help="seed for data generation and training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--T", type=int, help="frames per clip")
    p.add_argument("--depth-self", type=int, dest="depth_self")
    p.add_argument("--depth-cross", type=int, dest="depth_cross")
    p.add_argument("--variant", choices=("full", "selfview", "baseline"))
    p.add_argument("--hi-res", action="store_true", dest="hi_res")
    p.add_argument("--literal-eq5", action="store_true", dest="literal_eq5")
    p.add_argument("--literal-eq8", action="store_true", dest="literal_eq8")
    p.add_argument("--literal-eq12", action="store_true", dest="literal_eq12")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    result = fit(cfg, eval_every_epoch=True, log=None if args.quiet else _print_row)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.tmtk", result.model, cfg.to_dict())
    write_metrics_csv(out / "metrics.csv", result.metrics)
    result.report.write(out / "report.json")
    print(f"rank1={result.report.rank1:.4f} mAP={result.report.map:.4f} "
          f"steps={sum(1 for _ in result.step_losses)} seconds={result.seconds:.1f}")
    print(f"wrote {out / 'checkpoint.tmtk'}, {out / 'metrics.csv'}, {out / 'report.json'}")
    return EXIT_OK


def _print_row(row: dict) -> None:
    print(f"epoch {row['epoch']:>3} steps {row['steps']:>4} lr {row['lr']:.2e} "
          f"loss {row['loss']:.4f} rank1 {row['rank1']:.4f} mAP {row['map']:.4f}")


def cmd_eval(args) -> int:
    if bool(args.query) != bool(args.gallery):
        raise UsageError("--query and --gallery must be given together")
    model, header = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(header.get("config") or {})
    if args.single_gallery:
        cfg.eval.single_gallery = True
    if args.view:
        cfg.eval.view = _VIEW_ALIASES.get(args.view, args.view)
    if args.metric:
        cfg.eval.metric = args.metric
    cfg.check()
    if args.query:
        query, gallery = load_cube_dir(args.query), load_cube_dir(args.gallery)
        if not query or not gallery:
            raise ContractError(f"empty query ({len(query)}) or gallery ({len(gallery)}) directory")
        if model.extractor is not None:
            raise ContractError("checkpoint was trained on images; cube directories need an ingest model")
        expected = (cfg.model.frames,) + tuple(model.config.geometry) + (model.config.channels,)
        got = query[0].cubes[0].shape[1:]
        if got != expected[1:]:
            raise DimensionError(f"cubes have (H, W, C)={got}, checkpoint expects {expected[1:]}")
    else:
        split = prepare_split(cfg)
        query, gallery = split.query, split.gallery
    report = evaluate_model(model, query, gallery, cfg.eval)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "report.json", out / "per_query_ap.csv")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.blocks, h=args.h, corrupt=args.corrupt, seed=args.seed or 0)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def bench_settings(axis: str, values) -> list[tuple[str, dict]]:
    """(label, edits) per bench row; edits are applied to a fresh config."""
    if axis not in BENCH_AXES:
        raise UsageError(f"unknown bench axis {axis!r}; choose from {sorted(BENCH_AXES)}")
    values = list(values or BENCH_AXES[axis])
    rows = []
    for v in values:
        if axis == "T":
            rows.append((v, {"frames": int(v)}))
        elif axis == "depth_selfview":
            rows.append((v, {"depth_self": int(v)}))
        elif axis == "depth_crossview":
            rows.append((v, {"depth_cross": int(v)}))
        elif axis == "hi_res":
            rows.append((v, {"hi_res": v.lower() in ("1", "true", "on")}))
        elif axis == "views":
            view = _VIEW_ALIASES.get(v, v)
            if view not in ("spatial", "temporal", "spatiotemporal", "all"):
                raise UsageError(f"unknown view {v!r}")
            rows.append((v, {"view": view}))
        elif axis == "cross_on_off":
            if v not in ("on", "off"):
                raise UsageError(f"cross_on_off takes 'on' or 'off', got {v!r}")
            rows.append((v, {"variant": "full" if v == "on" else "selfview"}))
        elif axis == "variant":
            if v not in ("full", "selfview", "baseline"):
                raise UsageError(f"unknown variant {v!r}")
            rows.append((v, {"variant": v}))
    return rows


def _apply(cfg: RunConfig, edits: dict) -> RunConfig:
    cfg = RunConfig.from_dict(cfg.to_dict())
    for key, value in edits.items():
        if key == "frames":
            cfg.train.frames = value
            cfg.model.frames = value
        elif key == "view":
            cfg.eval.view = value
        else:
            setattr(cfg.model, key, value)
    return cfg.check()


def run_bench(base: RunConfig, axis: str, values=None, seeds: int = 1, log=print) -> list[dict]:
    """Train per (setting, seed) on the same synthetic data; one metrics row each.

    For the ``views`` axis one model per seed is trained and its descriptor
    is evaluated under every view selection.
    """
    settings = bench_settings(axis, values)
    configs = [(label, _apply(base, edits)) for label, edits in settings]
    rows = []
    trained = {}
    for s in range(seeds):
        for label, cfg in configs:
            cfg = RunConfig.from_dict(cfg.to_dict())
            cfg.train.seed = base.train.seed + s
            if axis == "views":
                key = s
                if key not in trained:
                    trained[key] = fit(cfg, eval_every_epoch=False)
                result = trained[key]
                split = prepare_split(cfg)
                report = evaluate_model(result.model, split.query, split.gallery, cfg.eval)
            else:
                result = fit(cfg, eval_every_epoch=False)
                report = result.report
            row = {"axis": axis, "value": label, "seed": cfg.train.seed,
                   "map": report.map, "rank1": report.rank1, "seconds": result.seconds}
            rows.append(row)
            if log:
                log(f"{axis}={label} seed={row['seed']} mAP={row['map']:.4f} rank1={row['rank1']:.4f}")
    return rows


def summarize_bench(rows: list[dict]) -> list[dict]:
    out = []
    for label in dict.fromkeys(r["value"] for r in rows):
        group = [r for r in rows if r["value"] == label]
        maps = np.array([r["map"] for r in group])
        r1 = np.array([r["rank1"] for r in group])
        out.append({"axis": group[0]["axis"], "value": label, "seeds": len(group),
                    "map_mean": float(maps.mean()), "map_std": float(maps.std()),
                    "rank1_mean": float(r1.mean()), "rank1_std": float(r1.std())})
    return out


def cmd_bench(args) -> int:
    settings = bench_settings(args.axis, args.values)  # usage errors before any work
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    base = load_run_config(args)
    for _, edits in settings:
        _apply(base, edits)
    rows = run_bench(base, args.axis, args.values, args.seeds)
    summary = summarize_bench(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / f"bench_{args.axis}.csv", rows)
    _write_rows(out / f"bench_{args.axis}_summary.csv", summary)
    for s in summary:
        print(f"{s['axis']}={s['value']}: mAP {s['map_mean']:.4f} ± {s['map_std']:.4f}, "
              f"rank1 {s['rank1_mean']:.4f} ± {s['rank1_std']:.4f} ({s['seeds']} seeds)")
    return EXIT_OK


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.read_bytes()[:4]
    if head == CHECKPOINT_MAGIC:
        model, header = load_checkpoint(path)
        info = {"kind": "checkpoint", "format_version": header["format_version"], "model": header["model"],
                "tensors": len(header["tensors"]),
                "values": int(sum(np.prod(t["shape"]) for t in header["tensors"]))}
    else:
        cubes, meta = read_cube(path)
        info = {"kind": "cube", "shape": list(cubes[0].shape), "views": len(cubes),
                "identity": meta.identity, "camera": meta.camera, "notes": meta.notes,
                "sidecar": str(sidecar_path(path)),
                "mean_abs": [float(np.abs(c).mean()) for c in cubes]}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth_cubes(args) -> int:
    cfg = load_run_config(args)
    cfg.data.source = "synthetic_cubes"
    cfg.check()
    split = prepare_split(cfg)
    out = Path(args.out)
    notes = {"generator": "synth_generate_cubes", "seed": cfg.synth.seed, "split": cfg.data.split}
    for name, tracklets in (("train", split.train), ("query", split.query), ("gallery", split.gallery)):
        save_cube_dir(out / name, tracklets, notes)
    ingest = cfg.to_dict()
    ingest["data"] = {"source": "cubes", "split": cfg.data.split, "train_dir": str(out / "train"),
                      "query_dir": str(out / "query"), "gallery_dir": str(out / "gallery")}
    (out / "config.json").write_text(json.dumps(ingest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(split.train)} train, {len(split.query)} query, {len(split.gallery)} gallery cubes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmt", description="Trigeminal transformer desk toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics CSV")
    _add_model_flags(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", help="directory of query cubes")
    p.add_argument("--gallery", help="directory of gallery cubes")
    p.add_argument("--out")
    p.add_argument("--single-gallery", action="store_true", dest="single_gallery")
    p.add_argument("--view", choices=("all", "spatial", "temporal", "spatiotemporal", "st"))
    p.add_argument("--metric", choices=("euclidean", "cosine"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every block")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--corrupt", choices=BLOCKS)
    p.add_argument("--blocks", nargs="+", choices=BLOCKS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="ablation sweep on the synthetic benchmark")
    _add_model_flags(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", nargs="+")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print the header of a cube file or checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth-cubes", help="write a synthetic feature-cube dataset")
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_cubes)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, DimensionError, ValueError, TypeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
