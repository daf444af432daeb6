"""Command-line entry point: ``distilled-replay <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness
from .config import ConfigError, load_config
from .data import FormatError, write_mnist_subset

EXIT_CONFIG = 2
EXIT_DATA = 3


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    return cfg


def cmd_run(args):
    cfg = _config(args)
    res = harness.run(cfg, args.output_dir)
    for strategy in cfg.strategies:
        series = res.series(strategy).mean(axis=0)
        print(f"{strategy:>17}: " + " ".join(f"A{t}={a:.2f}" for t, a in enumerate(series, start=1)))
    print(f"results written to {res.output_dir}")


def cmd_ablation(args):
    report = harness.ablation(_config(args), args.output_dir)
    for arm, info in report["arms"].items():
        print(f"{arm:>21}: " + " ".join(f"{a:.2f}" for a in info["mean_series"]))


def cmd_timing(args):
    report = harness.timing(_config(args), args.output_dir)
    for row in report["rows"]:
        print(f"{row['axis']}={row['value']:<4} {row['mean_seconds']:.4f}s ± {row['std_seconds']:.4f}")
    if report["s_fit_r2"] is not None:
        print(f"linear fit over S: R^2 = {report['s_fit_r2']:.4f}")


def cmd_export_buffer(args):
    files = harness.export_buffer(args.result_path, args.out_dir, png=args.png)
    print(f"wrote {len(files)} files to {args.out_dir}")


def cmd_distill(args):
    cfg = _config(args)
    path = harness.distill_one(cfg, args.experience, args.seed, args.output)
    print(f"distilled memory written to {path}")


def cmd_validate_config(args):
    cfg = load_config(args.config)
    print(json.dumps({"config_hash": cfg.hash(), "config": cfg.to_dict()}, indent=2, sort_keys=True))


def cmd_make_mnist_subset(args):
    out = write_mnist_subset(args.out_dir, args.test_per_class, args.seed)
    print(f"MNIST subset written to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distilled-replay", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="config file path or preset name")
        sp.add_argument("--seeds", help="comma-separated seed list overriding [run] seeds")
        sp.set_defaults(fn=fn)
        return sp

    sp = with_config("run", cmd_run, "train every configured strategy and seed")
    sp.add_argument("--output-dir")
    sp = with_config("ablation", cmd_ablation, "buffer distillation vs dataset distillation")
    sp.add_argument("--output-dir")
    sp = with_config("timing", cmd_timing, "distillation wall time over S and R grids")
    sp.add_argument("--output-dir")
    sp = with_config("distill", cmd_distill, "distill a single experience")
    sp.add_argument("--experience", type=int, default=1)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")

    sp = sub.add_parser("export-buffer", help="write stored memories as PGM/PNG images")
    sp.add_argument("result_path", help="run directory or memory file")
    sp.add_argument("out_dir")
    sp.add_argument("--png", action="store_true")
    sp.set_defaults(fn=cmd_export_buffer)

    sp = sub.add_parser("validate-config", help="parse a config and print it resolved")
    sp.add_argument("config")
    sp.set_defaults(fn=cmd_validate_config)

    sp = sub.add_parser("make-mnist-subset", help="write the 5000-image MNIST subset from mlxtend as IDX files")
    sp.add_argument("out_dir")
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_make_mnist_subset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
