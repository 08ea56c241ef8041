import argparse
import logging
import sys
from typing import NoReturn, Optional, Sequence

from .config import MODES, RunConfig, load_run_config, load_synth_spec
from .exceptions import AqaError, ConfigurationError
from .gradcheck import check_audits, format_audit_table
from .main import cmd_eval, cmd_gradcheck, cmd_preprocess, cmd_synth, cmd_train


logger = logging.getLogger(__name__)

IO_EXIT_CODE: int = 2


class ArgumentParser(argparse.ArgumentParser):
    """Parser reporting usage errors as `ConfigurationError` (exit status 1)."""

    def error(self, message: str) -> NoReturn:
        raise ConfigurationError(f"{self.prog}: {message}")


def _u64(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer: {value}")
    return seed


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="sparse-aqa",
        description="Score gymnastics performances from pose sequences.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    sub = parser.add_subparsers(dest="command", required=True)

    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML configuration file")
    common.add_argument("--seed", type=_u64, help="override the configured seed")
    common.add_argument("--out", help="output directory")

    pre = sub.add_parser("preprocess", parents=[common], help="clean pose-record directories")
    pre.add_argument("--input", required=True, help="directory of per-sample pose records")
    pre.add_argument("--labels", help="label file to validate and copy")
    pre.add_argument(
        "--no-interpolation",
        action="store_true",
        help="keep incomplete frames without repairing them",
    )
    pre.add_argument("--workers", type=int, help="samples cleaned concurrently")

    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")

    for name, text in (("train", "train a model"), ("gradcheck", "audit gradients")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--mode", choices=MODES, help="override the distillation mode")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    ev.add_argument("--data", help="cleaned sequences or feature directory")
    ev.add_argument("--labels", help="label file")

    return parser


def _run_config(args: argparse.Namespace, required: bool) -> RunConfig:
    if args.config is not None:
        cfg = load_run_config(args.config)
    elif required:
        raise ConfigurationError("a --config file is required for this command")
    else:
        cfg = RunConfig(seed=0)

    if args.seed is not None:
        cfg = cfg._replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg._replace(output_dir=args.out)
    if getattr(args, "mode", None) is not None:
        cfg = cfg._replace(mode=args.mode)
    return cfg


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "preprocess":
        cfg = _run_config(args, required=False)
        out = args.out if args.out is not None else cfg.output_dir
        if out is None:
            raise ConfigurationError("preprocess needs an output directory (--out)")
        rows = cmd_preprocess(
            args.input,
            args.labels,
            out,
            interpolate=cfg.interpolate and not args.no_interpolation,
            workers=args.workers if args.workers is not None else cfg.workers,
        )
        skipped = [row["sample_id"] for row in rows if row["status"] != "ok"]
        print(f"{len(rows) - len(skipped)} samples written, {len(skipped)} skipped")

    elif args.command == "synth":
        spec = load_synth_spec(args.config)
        if args.seed is not None:
            spec = spec._replace(seed=args.seed)
        if args.out is None:
            raise ConfigurationError("synth needs an output directory (--out)")
        labels = cmd_synth(spec, args.out)
        print(f"{len(labels)} samples written to {args.out}")

    elif args.command == "train":
        ckpt = cmd_train(_run_config(args, required=True))
        print(f"best checkpoint from epoch {ckpt.epoch}")

    elif args.command == "eval":
        record = cmd_eval(args.checkpoint, args.data, args.labels, args.out)
        for key in sorted(record):
            print(f"{key}: {record[key]}")

    elif args.command == "gradcheck":
        audits = cmd_gradcheck(_run_config(args, required=False))
        print(format_audit_table(audits))
        check_audits(audits)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point.

    Returns:
        0 on success, 1 on invalid input or configuration, 2 on I/O errors,
        3 on numeric failures and 4 when the gradient audit fails.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigurationError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"{e}\n")
        return e.exit_code

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        _dispatch(args)
    except AqaError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":
    sys.exit(main())
