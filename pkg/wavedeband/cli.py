"""Command line entry point.

    wavedeband synth --out data/
    wavedeband train data/ --variant plain --out runs/plain
    wavedeband infer runs/plain/checkpoint.pt photo.png --variant wwm --out out/
    wavedeband eval data/ --run runs/plain/checkpoint.pt:plain \\
        --run runs/plain/checkpoint.pt:wwm --out report/
    wavedeband fuse banded.png other_restorer.png --out fused/
    wavedeband info runs/plain/checkpoint.pt

Every subcommand accepts ``--config``, ``--seed``, ``--force``, ``--out``,
``--set key=value`` and ``--log-level``. Failures print one line
``<code>: <message>`` to stderr and exit with status 1.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, NoReturn, Optional, Sequence

from wavedeband._errors import ArgumentError, WaveDebandError
from wavedeband.runner import (
    cmd_eval,
    cmd_fuse,
    cmd_info,
    cmd_infer,
    cmd_synth,
    cmd_train,
    resolve_config,
)
from wavedeband.schema import Variant
from wavedeband.serialization import dumps_json
from wavedeband.version import __version__

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# argparse destination -> dotted configuration key.
_FLAG_KEYS = {
    "seed": "seed",
    "corpus_size": "data.corpus_size",
    "size": "data.image_size",
    "bits": "data.bits",
    "patch": "data.patch",
    "stride": "data.stride",
    "dither": "data.dither",
    "data_format": "data.format",
    "variant": "train.variant",
    "steps": "train.steps",
    "batch": "train.batch",
    "lr": "train.learning_rate",
    "eval_every": "train.eval_every",
    "split": "eval.split",
    "depth": "net.depth",
}

_VARIANTS = [v.value for v in Variant]


class _Parser(argparse.ArgumentParser):
    """Raises ArgumentError on usage errors."""

    def error(self, message: str) -> NoReturn:
        raise ArgumentError(f"{self.prog}: {message}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument(
        "--force", action="store_true", help="write into a non-empty output directory"
    )
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key, e.g. --set net.base_channels=32",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="wavedeband",
        description="Wavelet state space debanding: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    synth = commands.add_parser(
        "synth", parents=[common], help="generate a synthetic banding dataset"
    )
    synth.add_argument("--n", dest="corpus_size", type=int, help="source images")
    synth.add_argument("--size", type=int, help="source image side")
    synth.add_argument("--bits", type=int, nargs="+", help="bit depths to draw from")
    synth.add_argument("--patch", type=int)
    synth.add_argument("--stride", type=int)
    synth.add_argument("--dither", action="store_const", const=True, default=None)
    synth.add_argument("--format", dest="data_format", choices=["npy", "png"])

    train = commands.add_parser("train", parents=[common], help="train a variant")
    train.add_argument("data_dir", type=Path)
    train.add_argument("--variant", choices=_VARIANTS)
    train.add_argument("--steps", type=int)
    train.add_argument("--batch", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--eval-every", type=int)

    infer = commands.add_parser("infer", parents=[common], help="restore images")
    infer.add_argument("checkpoint", type=Path)
    infer.add_argument("input", type=Path, help="image file or directory")
    infer.add_argument(
        "--variant",
        dest="infer_variant",
        choices=_VARIANTS,
        help="defaults to the checkpoint's variant",
    )
    infer.add_argument(
        "--format", dest="image_format", choices=["png", "npy"], default="png"
    )

    evaluate = commands.add_parser(
        "eval", parents=[common], help="compare variants on a dataset split"
    )
    evaluate.add_argument("data_dir", type=Path)
    evaluate.add_argument(
        "--run",
        dest="runs",
        action="append",
        default=[],
        metavar="CHECKPOINT[:VARIANT]",
    )
    evaluate.add_argument("--split", choices=["train", "val", "test", "all"])

    info = commands.add_parser(
        "info", parents=[common], help="describe a checkpoint or dataset"
    )
    info.add_argument("target", type=Path, nargs="?")

    fuse = commands.add_parser(
        "fuse",
        parents=[common],
        help="fuse another restorer's output with its input using the WWM mask",
    )
    fuse.add_argument("banded", type=Path)
    fuse.add_argument("restored", type=Path)
    fuse.add_argument("--depth", type=int, help="wavelet levels (default net.depth)")
    fuse.add_argument(
        "--format", dest="image_format", choices=["png", "npy"], default="png"
    )
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        key: getattr(args, name)
        for name, key in _FLAG_KEYS.items()
        if hasattr(args, name)
    }


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise ArgumentError(f"--out is required for {args.command}")
    return args.out


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args.config, args.overrides, _flags(args))
    if args.command == "info":
        sys.stdout.write(dumps_json(cmd_info(cfg, args.target), indent=True).decode())
        sys.stdout.write("\n")
        return

    out = _out_dir(args)
    if args.command == "synth":
        counts = cmd_synth(cfg, out, force=args.force)
        logger.info("Wrote dataset to %s with splits %s", out, counts)
    elif args.command == "train":
        checkpoint = cmd_train(cfg, args.data_dir, out, force=args.force)
        logger.info("Checkpoint written to %s", checkpoint)
    elif args.command == "infer":
        cmd_infer(
            cfg,
            args.checkpoint,
            args.input,
            out,
            variant=args.infer_variant,
            image_format=args.image_format,
            force=args.force,
        )
    elif args.command == "eval":
        if not args.runs:
            logger.info("No --run given; reporting the banded baseline only")
        report = cmd_eval(cfg, args.data_dir, args.runs, out, force=args.force)
        for summary in report.summaries:
            psnr = summary.columns["psnr_db"].mean
            bei = summary.columns["bei_restored"].mean
            logger.info(
                "%s: %d rows, psnr %.3f dB, bei %.5f",
                summary.variant,
                summary.count,
                psnr,
                bei,
            )
    elif args.command == "fuse":
        target = cmd_fuse(
            cfg,
            args.banded,
            args.restored,
            out,
            image_format=args.image_format,
            force=args.force,
        )
        logger.info("Fused image written to %s", target)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
        run(args)
    except WaveDebandError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
