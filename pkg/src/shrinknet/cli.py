"""Command-line entry points.

Verbs: `preprocess` (mesh tree to cache), `synth` (procedural dataset),
`train`, `eval`, and `gradcheck`. Failures map to stable exit codes:
2 for configuration problems, 3 for data problems, 4 for numeric ones.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfgmod
from . import report
from .dataio import build_cache_from_meshes, read_cache, write_cache
from .errors import ConfigError, DataError, NumericError
from .gradcheck import run_gradient_checks
from .synth import GENERATORS, make_synth_cache
from .train import evaluate, load_checkpoint, save_checkpoint, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_run_config(args) -> cfgmod.RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "train_cache", None) is not None:
        overrides["data.train_cache"] = args.train_cache
    if getattr(args, "test_cache", None) is not None:
        overrides["data.test_cache"] = args.test_cache
    if getattr(args, "out_dir", None) is not None:
        overrides["train.out_dir"] = args.out_dir
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def cmd_preprocess(args) -> int:
    run = _load_run_config(args)
    points = args.points if args.points is not None else run.data["points"]
    dims = args.dims if args.dims is not None else run.data["dims"]
    data_dir = args.data_dir or run.data["dir"]
    if data_dir is None:
        raise ConfigError("preprocess needs --data-dir or data.dir in the config")
    cache = build_cache_from_meshes(data_dir, args.split, points, dims, run.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_cache(cache, args.out)
    counts = cache.counts_per_class()
    print(f"wrote {args.out}: {len(cache.samples)} clouds, "
          f"{cache.points} points x {cache.dims} dims, "
          f"{len(cache.class_names)} classes")
    for name, n in zip(cache.class_names, counts):
        print(f"  {name}: {n}")
    return 0


def cmd_synth(args) -> int:
    run = _load_run_config(args)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    for c in classes:
        if c not in GENERATORS:
            raise ConfigError(
                f"unknown shape class {c!r}; choices: {', '.join(sorted(GENERATORS))}")
    points = args.points if args.points is not None else run.data["points"]
    os.makedirs(args.out_dir, exist_ok=True)
    for split, per_class in (("train", args.train_per_class),
                             ("test", args.test_per_class)):
        cache = make_synth_cache(classes, per_class, points, run.seed, split=split)
        path = os.path.join(args.out_dir, f"{split}.bin")
        write_cache(cache, path)
        print(f"wrote {path}: {len(cache.samples)} clouds "
              f"({per_class} per class, {points} points each)")
    return 0


def cmd_train(args) -> int:
    run = _load_run_config(args)
    cache_path = run.data["train_cache"]
    if cache_path is None:
        raise ConfigError("train needs --train-cache or data.train_cache in the config")
    data = read_cache(cache_path)
    if data.dims != run.data["dims"]:
        raise ConfigError(
            f"cache {cache_path} holds {data.dims}-dim points but the config "
            f"declares data.dims={run.data['dims']}")
    net_cfg = cfgmod.network_config_from(run, len(data.class_names))
    train_cfg = cfgmod.train_config_from(run)
    out_dir = run.train["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    resolved = run.to_yaml()
    sys.stdout.write(resolved)
    with open(os.path.join(out_dir, "resolved.yaml"), "w", encoding="utf-8") as fh:
        fh.write(resolved)

    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, history = train(train_cfg, net_cfg, data, resume=resume, log=print)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt, ckpt_path)
    paths = report.write_train_report(history, out_dir)
    print(f"checkpoint: {ckpt_path}")
    for p in paths:
        print(f"report: {p}")
    if ckpt.best_metric is not None:
        print(f"best validation accuracy {ckpt.best_metric:.4f} "
              f"at epoch {ckpt.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = read_cache(args.test_cache)
    metrics = evaluate(ckpt, data)
    print(report.format_metrics_table(metrics))
    if args.report_dir:
        for p in report.write_eval_report(metrics, args.report_dir):
            print(f"report: {p}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=args.seed if args.seed is not None else 0)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<18} max rel err {r.max_rel_err:.3e} "
              f"over {r.n_coords} coords in {r.seconds:.2f}s  [{status}]")
        ok = ok and r.passed
    if not ok:
        raise NumericError("gradient check failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shrinknet",
        description="Point-cloud classification with shrinking graph-convolution blocks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="sample meshes into a point-cloud cache")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data-dir", help="mesh tree: <dir>/<class>/<split>/*.off")
    p.add_argument("--split", choices=["train", "test"], required=True)
    p.add_argument("--out", required=True, help="cache file to write")
    p.add_argument("--points", type=int, help="points per cloud")
    p.add_argument("--dims", type=int, choices=[3, 6],
                   help="3 for positions, 6 to append normals")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a procedural shape dataset")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", default="sphere,cube,cylinder",
                   help="comma-separated shape names")
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=30)
    p.add_argument("--points", type=int, help="points per cloud")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier on a cache")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--train-cache", help="overrides data.train_cache")
    p.add_argument("--out-dir", help="overrides train.out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-cache", required=True)
    p.add_argument("--report-dir", help="write metrics.csv/metrics.txt/confusion.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients against finite differences")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
