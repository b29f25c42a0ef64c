"""Command-line entry point.

Subcommands: ``gen-synthetic``, ``pretrain``, ``train-pgl``, ``train-sfpgl``,
``eval`` and ``reliability``. Training flags mirror :class:`RunConfig` fields
(``--lr-gnn 3e-3``); ``--config FILE`` supplies any of them as ``key = value``
lines and flags given on the command line win. ``PGL_LOG_LEVEL`` sets the
log level (default ``WARNING``).

Exit status: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""
import argparse
import dataclasses
import logging
import os
import sys

from . import diagnostics
from .data import SyntheticConfig, generate_synthetic, write_feature_file, write_truth_file
from .driver import (ConfigError, RunConfig, config_from_mapping, evaluate, load_config,
                     pretrain_source, report_from_dump, train_pgl, train_sfpgl)
from .metrics import reliability_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _flag_type(ftype):
    if ftype in (bool, "bool"):
        return str   # parsed later so "--balanced false" works
    return {int: int, "int": int, float: float, "float": float}.get(ftype, str)


def _add_dataclass_flags(parser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                            type=_flag_type(f.type), metavar=f.name.upper(),
                            help=f"(default: {f.default!r})")


def _overrides(args, cls, skip=()):
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
            if f.name not in skip and getattr(args, f.name, None) is not None}


def _run_config(args, mode):
    overrides = _overrides(args, RunConfig, skip=("mode",))
    overrides["mode"] = mode
    if args.config:
        config = load_config(args.config, overrides)
    else:
        config = config_from_mapping(overrides)
    return config.validate()


def build_parser():
    parser = _Parser(prog="pgl", description="Progressive graph learning for open-set domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic source/target/truth triple")
    gen.add_argument("--out", required=True, help="output directory")
    _add_dataclass_flags(gen, SyntheticConfig)

    for name, help_text in (("pretrain", "train backbone and classifier on source data"),
                            ("train-pgl", "progressive graph learning with source data"),
                            ("train-sfpgl", "source-free adaptation from a checkpoint"),
                            ("eval", "score a checkpoint against target truth")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value config file")
        _add_dataclass_flags(p, RunConfig, skip=("mode",))

    rel = sub.add_parser("reliability", help="reliability bins from a predictions.tsv dump")
    rel.add_argument("predictions", help="predictions.tsv written by a run")
    rel.add_argument("--C", type=int, required=True, help="number of known classes")
    rel.add_argument("--bins", type=int, default=10)
    rel.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return parser


def _gen_synthetic(args):
    config = SyntheticConfig(**_overrides(args, SyntheticConfig))
    try:
        config.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    data = generate_synthetic(config)
    os.makedirs(args.out, exist_ok=True)
    write_feature_file(os.path.join(args.out, "source.tsv"), data.source)
    write_feature_file(os.path.join(args.out, "target.tsv"), data.target)
    write_truth_file(os.path.join(args.out, "truth.tsv"), data.target.ids, data.truth)
    print(f"wrote {len(data.source)} source and {len(data.target)} target records to {args.out}")


def _print_report(report):
    if report is not None:
        sys.stdout.write(report.to_text())


def _reliability(args):
    if args.bins < 1 or args.C < 1:
        raise ConfigError("--bins and --C must be >= 1")
    with open(args.predictions, encoding="utf-8") as fh:
        report = report_from_dump(fh.read(), args.C, args.bins)
    text = reliability_csv(report.bins)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"ECE = {report.ECE!r}", file=sys.stderr)


def dispatch(args):
    cmd = args.command
    if cmd == "gen-synthetic":
        return _gen_synthetic(args)
    if cmd == "reliability":
        return _reliability(args)
    mode = {"pretrain": "pretrain", "train-pgl": "pgl", "train-sfpgl": "sfpgl", "eval": "eval"}[cmd]
    config = _run_config(args, mode)
    if cmd == "pretrain":
        config.require("source_path", "C")
        if not (config.run_dir or config.checkpoint):
            raise ConfigError("pretrain needs run_dir or checkpoint")
        pretrain_source(config, checkpoint_path=config.checkpoint or None)
    elif cmd == "train-pgl":
        config.require("source_path", "target_path", "C")
        _print_report(train_pgl(config).report)
    elif cmd == "train-sfpgl":
        config.require("checkpoint", "target_path", "C")
        _print_report(train_sfpgl(config, config.checkpoint).report)
    else:
        config.require("checkpoint", "target_path", "truth_path")
        _print_report(evaluate(config.checkpoint, config).report)


def main(argv=None):
    level = os.environ.get("PGL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        counts = diagnostics.snapshot()
        if counts:
            logging.getLogger("pgl").info("diagnostic counters: %s", counts)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
