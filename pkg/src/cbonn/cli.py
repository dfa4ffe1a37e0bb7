"""Command-line entry point: run experiments, run verification suites, and
inspect IDX data files.

Exit codes: 0 success, 1 verification/run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import struct
import sys

import yaml

from . import config as cfgmod
from .data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, IdxFormatError
from .experiments import run_and_write
from .verify import SUITES, run_suites

_SCHEMA_POINTER = (
    "see the 'Configuration schema' section of README.md, or print a template "
    "with: cbonn run --experiment sine --method cbo --epochs 0"
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbonn",
        description="Derivative-free neural-network training experiments "
        "(consensus-based optimization and friends).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV results")
    run.add_argument("--config", help="YAML config file (as echoed by a previous run)")
    run.add_argument("--experiment", choices=cfgmod.EXPERIMENTS)
    run.add_argument("--method", help="adam | cbo | hybrid | multitask_cbo | ot_cbo")
    run.add_argument("--seed", type=int, help="base seed (default 0)")
    run.add_argument("--seeds", type=int, help="number of consecutive seeds to run")
    run.add_argument("--epochs", type=int)
    run.add_argument("--out", help="output directory (default $CBONN_OUT_DIR or ./runs)")
    run.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. optimizer.particles=50 (repeatable)",
    )

    verify = sub.add_parser("verify", help="run numerical verification suites")
    verify.add_argument(
        "--suite",
        action="append",
        choices=sorted(SUITES) + ["all"],
        help="suite to run (repeatable; default all)",
    )

    mnist = sub.add_parser("mnist-check", help="validate IDX image/label files")
    mnist.add_argument("--images", required=True)
    mnist.add_argument("--labels", required=True)

    sub.add_parser("list-experiments", help="list available experiment ids")
    return parser


def _parse_overrides(pairs: list[str], parser: argparse.ArgumentParser) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            parser.error(f"override {pair!r} is not of the form key=value")
        out[key] = yaml.safe_load(raw)
    return out


def _cmd_run(args, parser) -> int:
    if args.config:
        try:
            cfg = cfgmod.load(args.config)
        except FileNotFoundError:
            parser.error(f"config file {args.config!r} not found; {_SCHEMA_POINTER}")
        if args.experiment and args.experiment != cfg["experiment"]:
            parser.error("--experiment contradicts the config file")
        if args.method and args.method != cfg["method"]:
            parser.error("--method contradicts the config file")
    elif args.experiment and args.method:
        try:
            cfg = cfgmod.default_config(args.experiment, args.method)
        except cfgmod.ConfigError as err:
            parser.error(str(err))
    else:
        parser.error(f"need --config, or --experiment with --method; {_SCHEMA_POINTER}")

    overrides = _parse_overrides(args.override, parser)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seeds is not None or args.seed is not None:
        base = args.seed if args.seed is not None else 0
        count = args.seeds if args.seeds is not None else 1
        overrides["seeds"] = list(range(base, base + count))
    try:
        cfg = cfgmod.validate(cfgmod.apply_overrides(cfg, overrides))
    except cfgmod.ConfigError as err:
        parser.error(str(err))

    print("# resolved config (feed back via --config to reproduce)")
    print(cfgmod.to_yaml(cfg))
    margin = cfgmod.consensus_margin(cfg)
    print(f"# consensus margin 2*lam - sigma^2 = {margin:g}"
          + ("  (WARNING: consensus not guaranteed)" if margin <= 0 else ""))

    try:
        manifest = run_and_write(cfg)
    except (ValueError, OSError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1
    for path in manifest["runs"]:
        print(f"wrote {path}")
    if manifest["aggregate"]:
        print(f"wrote {manifest['aggregate']}")
    incomplete = [r for r in manifest["records"] if not r.completed]
    for record in incomplete:
        print(f"seed {record.seed} aborted: {record.abort_reason}", file=sys.stderr)
    return 1 if incomplete else 0


def _cmd_verify(args) -> int:
    names = None
    if args.suite and "all" not in args.suite:
        names = list(dict.fromkeys(args.suite))
    results = run_suites(names)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    print(f"{len(results) - failures}/{len(results)} suites passed")
    return 1 if failures else 0


def _cmd_mnist_check(args) -> int:
    try:
        with open(args.images, "rb") as f:
            header = f.read(16)
            if len(header) < 16:
                raise IdxFormatError(f"{args.images}: truncated header")
            magic, count, rows, cols = struct.unpack(">IIII", header)
            if magic != IDX_IMAGES_MAGIC:
                raise IdxFormatError(f"{args.images}: bad magic {magic}")
            f.seek(0, 2)
            if f.tell() < 16 + count * rows * cols:
                raise IdxFormatError(f"{args.images}: truncated data section")
        with open(args.labels, "rb") as f:
            header = f.read(8)
            if len(header) < 8:
                raise IdxFormatError(f"{args.labels}: truncated header")
            lab_magic, lab_count = struct.unpack(">II", header)
            if lab_magic != IDX_LABELS_MAGIC:
                raise IdxFormatError(f"{args.labels}: bad magic {lab_magic}")
            f.seek(0, 2)
            if f.tell() < 8 + lab_count:
                raise IdxFormatError(f"{args.labels}: truncated data section")
        if lab_count != count:
            raise IdxFormatError(f"image count {count} != label count {lab_count}")
    except (OSError, IdxFormatError) as err:
        print(f"invalid: {err}", file=sys.stderr)
        return 1
    print(f"images: magic {magic}, count {count}, {rows}x{cols}")
    print(f"labels: magic {lab_magic}, count {lab_count}")
    return 0


def _cmd_list() -> int:
    for experiment in cfgmod.EXPERIMENTS:
        methods = ", ".join(cfgmod.METHODS_BY_EXPERIMENT[experiment])
        print(f"{experiment}: {methods}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "mnist-check":
        return _cmd_mnist_check(args)
    return _cmd_list()


if __name__ == "__main__":
    sys.exit(main())
