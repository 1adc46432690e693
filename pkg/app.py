"""Command-line entry point of the GINA pipeline."""

import argparse
import sys
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from loguru import logger

from libs.exceptions import EXIT_FAILURE, EXIT_OK, GinaError, UsageError, format_error_response, get_exit_code
from libs.logs import configure_logging
from libs.schema import PRESETS, load_config
from views import commands


class GinaArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message, {"usage": self.format_usage().strip()})


def _common() -> argparse.ArgumentParser:
    common = GinaArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Run seed")
    common.add_argument("--preset", choices=sorted(PRESETS), default=argparse.SUPPRESS, help="Configuration preset")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file overriding preset fields")
    return common


def _leaf(subparsers, name: str, command: str, handler, help: str) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(name, parents=[_common()], help=help)
    parser.set_defaults(handler=handler, command=command)
    return parser


def build_parser() -> GinaArgumentParser:
    """Parser for every subcommand."""
    parser = GinaArgumentParser(prog="gina", description="3D asset generation from object-centric images", parents=[_common()])
    sub = parser.add_subparsers(dest="group", required=True)

    data = sub.add_parser("data", help="Synthetic data").add_subparsers(dest="action", required=True)
    p = _leaf(data, "gen", "data gen", commands.data_gen, "Generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--occlusion-prob", type=float, default=0.5)
    p.add_argument("--min-visibility", type=float, default=0.1)

    train = sub.add_parser("train", help="Training").add_subparsers(dest="action", required=True)
    p = _leaf(train, "stage1", "train stage1", commands.train_stage1, "Train the tri-plane autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="Stage-1 checkpoint to continue from")

    p = _leaf(train, "stage2", "train stage2", commands.train_stage2, "Train the token prior")
    p.add_argument("--stage1", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--condition", default="none", choices=("none", "class", "time", "scale", "semantic"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)

    p = _leaf(sub, "sample", "sample", commands.sample_cmd, "Synthesize assets")
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--condition-json", default=None, help="Condition as inline JSON or a JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)

    p = _leaf(sub, "reconstruct", "reconstruct", commands.reconstruct_cmd, "Reconstruct dataset views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = _leaf(sub, "vary", "vary", commands.vary_cmd, "Resample part of a reconstructed asset")
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = _leaf(sub, "mesh", "mesh", commands.mesh_cmd, "Extract a mesh from a token grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--scale", type=float, nargs=3, default=None)
    p.add_argument("--color", action="store_true")
    p.add_argument("--out", required=True)

    p = _leaf(sub, "eval", "eval", commands.eval_cmd, "Evaluate a generated set")
    p.add_argument("--generated", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--ckpt", default=None)

    p = _leaf(sub, "gallery", "gallery", commands.gallery_cmd, "Tile rendered samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime failure
    """
    load_dotenv()
    configure_logging()
    argv: List[str] = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            # --help and --version exit through argparse
            return EXIT_OK if not e.code else get_exit_code(UsageError(str(e.code)))
        config = load_config(
            getattr(args, "preset", "desk"),
            config_file=getattr(args, "config", None),
            seed=getattr(args, "seed", None),
        )
        return args.handler(args, config, argv)
    except UsageError as e:
        sys.stderr.write(f"{e.details.get('usage', parser.format_usage().strip())}\ngina: error: {e.message}\n")
        logger.bind(**format_error_response(e)).error(e.message)
        return get_exit_code(e)
    except GinaError as e:
        logger.bind(**format_error_response(e)).error(e.message)
        return get_exit_code(e)
    except Exception as e:
        logger.exception("Unexpected failure: {}", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
