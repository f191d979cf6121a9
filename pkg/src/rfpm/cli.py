"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

COMMANDS = ("gradcheck", "gen-data", "train", "eval", "ablate", "transfer", "viz")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfpm", description="Multi-column feature pyramid optical flow toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 42)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=_positive(int), default=1, help="worker thread cap (default 1)")

    def training(p):
        p.add_argument("--config", help="plain-text key = value run configuration")
        p.add_argument("--data", help="training data directory written by gen-data")
        p.add_argument("--columns", help="downsampler kinds per column, e.g. W/R/W")
        p.add_argument("--mask-levels", type=_int_list, help="repair-mask levels, e.g. 1,2")
        p.add_argument("--ada", type=float, help="asymmetric augmentation probability")
        p.add_argument("--iters", type=int, help="training iterations")
        p.add_argument("--batch", type=_positive(int), help="batch size")
        p.add_argument("--lr", type=_positive(float), help="learning rate")
        p.add_argument("--count", type=_positive(int), help="number of generated training scenes")
        p.add_argument("--size", type=_positive(int), help="generated scene size in pixels")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, out_required=False)
    p.add_argument("--ops", default="all", help="comma-separated op names or 'all'")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--count", type=_positive(int), required=True)
    p.add_argument("--size", type=_positive(int), default=64)

    p = sub.add_parser("train", help="train a model from scratch")
    common(p)
    training(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", help="train the ablation grid and write the results table")
    common(p)
    training(p)

    p = sub.add_parser("transfer", help="add pyramid columns to a trained single-column model")
    common(p)
    training(p)
    p.add_argument("--ckpt", required=True, help="trained base checkpoint")

    p = sub.add_parser("viz", help="colour-coded flow images")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="also render this model's predictions")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    for var in THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)

    # imported late so the thread caps above are seen by the BLAS runtime
    from . import commands
    from .errors import ConfigError, RFPMError

    handler = getattr(commands, "cmd_" + args.command.replace("-", "_"))
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"rfpm {args.command}: {exc}", file=sys.stderr)
        return 1
    except (RFPMError, OSError, ArithmeticError, ValueError) as exc:
        print(f"rfpm {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
