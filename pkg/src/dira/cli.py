"""Command-line entry point: ``dira {train-source,sweep,dynamic,report}``.

Exit codes: 0 success, 2 configuration error, 3 data/format error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import harness as H
from .errors import ConfigError, DiraError

log = logging.getLogger("dira")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# (flag, config field, type, help)
_FLAGS = [
    ("--dataset", "dataset", str, "'digits', 'synthetic' or a directory with images.idx/labels.idx"),
    ("--image-size", "image_size", int, "rescale square images to this side length"),
    ("--arch", "architecture", str, "mlp or cnn-small"),
    ("--hidden", "hidden", _ints, "hidden widths / conv channels, comma-separated"),
    ("--corruptions", "corruptions", _words, "corruption kinds, comma-separated"),
    ("--severity", "severity", int, "corruption severity 1-5"),
    ("--sample-counts", "sample_counts", _ints, "target sample counts, comma-separated"),
    ("--methods", "methods", _words, "subset of source,sgd_high,sgd_low,dira"),
    ("--eta", "eta", float, "DIRA learning rate"),
    ("--lambda", "lam", float, "penalty weight"),
    ("--epochs", "epochs", int, "adaptation epochs"),
    ("--batch-size", "batch_size", int, "adaptation batch size (default min(32, n))"),
    ("--sgd-high-eta", "sgd_high_eta", float, "learning rate of the sgd_high baseline"),
    ("--sgd-low-eta", "sgd_low_eta", float, "learning rate of the sgd_low baseline (default: --eta)"),
    ("--seed", "seed", int, "base seed"),
    ("--n-seeds", "n_seeds", int, "number of repetitions"),
    ("--source-eta", "source_eta", float, "source training learning rate"),
    ("--source-batch-size", "source_batch_size", int, "source training batch size"),
    ("--source-momentum", "source_momentum", float, "source training momentum"),
    ("--source-lr-drops", "source_lr_drops", int, "learning-rate drops on plateau"),
    ("--source-max-epochs", "source_max_epochs", int, "source training epoch cap"),
    ("--fisher-samples", "fisher_samples", int, "samples for the Fisher estimate"),
    ("--train-fraction", "train_fraction", float, "share of the dataset used for source training"),
    ("--target-train-fraction", "target_train_fraction", float, "share of each target domain forming the S_T pool"),
    ("--output-dir", "output_dir", str, "artifact and result directory"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    for flag, dest, typ, help_ in _FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
    p.add_argument("--timing", dest="record_timing", action="store_true", default=None,
                   help="fill wall_ms (makes CSV output run-dependent)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dira", description="Few-sample domain adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train-source", help="train M0 and estimate its Fisher diagonal")
    _add_config_flags(p)
    p = sub.add_parser("sweep", help="run every corruption x n_samples x method x seed cell")
    _add_config_flags(p)
    p = sub.add_parser("dynamic", help="visit target domains in sequence, restarting from M0")
    _add_config_flags(p)
    p.add_argument("--schedule", type=_words, default=None, help="domain order (default: --corruptions)")
    p = sub.add_parser("report", help="tabulate and plot a results CSV")
    p.add_argument("results", type=Path)
    p.add_argument("--n", dest="n_samples", type=int, default=None, help="sample count to tabulate (default: largest)")
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--no-plots", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> H.ExperimentConfig:
    base = H.ExperimentConfig.from_file(args.config) if args.config else H.ExperimentConfig()
    d = asdict(base)
    for f in fields(H.ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    cfg = H.ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        table = H.cmd_report(args.results, args.n_samples, args.output_dir, plots=not args.no_plots)
        sys.stdout.write(table.render())
        return 0
    cfg = config_from_args(args)
    if args.command == "train-source":
        metrics = H.cmd_train_source(cfg)
        print(f"source test accuracy {metrics['top1_source_test']:.4f}; artifacts in {cfg.output_dir}")
    elif args.command == "sweep":
        rows = H.cmd_sweep(cfg)
        print(f"{len(rows)} rows written to {Path(cfg.output_dir) / 'sweep.csv'}")
    else:
        rows = H.cmd_dynamic(cfg, args.schedule)
        print(f"{len(rows)} rows written to {Path(cfg.output_dir) / 'dynamic.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except DiraError as exc:
        print(f"dira: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"dira: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
