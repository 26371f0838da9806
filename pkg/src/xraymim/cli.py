"""The `xraymim` command.

This module must stay importable without numpy: --threads caps the BLAS
thread pools through environment variables, which only work if they are
set before numpy first loads. Argument parsing and config resolution are
therefore pure stdlib, and the command bodies import lazily afterwards.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 numerical.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .config import PRESET_NAMES, make_run_dir, parse_config_file, render_config, resolve_config
from .errors import ConfigError, NumericalError, XrayMimError

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

USAGE_EXIT = 2
CONFIG_EXIT = 3
DATA_EXIT = 4
NUMERICAL_EXIT = 5


def _common_flags(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="config file (JSON or key = value lines)")
    p.add_argument("--out", required=False, help="run directory" + ("" if out_required else " (optional)"))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest")
    p.add_argument("--data-fraction", type=float)
    p.add_argument("--image-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xraymim",
        description="Masked-feature pre-training and transfer for grayscale images",
    )
    parser.add_argument("--version", action="version", version=f"xraymim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="masked-feature pre-training against a frozen tokenizer")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--tokenizer-ckpt")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--crop-scale-min", type=float)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("finetune-cls", help="classification fine-tuning")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--task", choices=("multi", "single"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--llrd-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--crop-scale-min", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("finetune-seg", help="segmentation fine-tuning")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--decoder-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int)

    for name, help_text in (
        ("eval-cls", "classification metrics for a trained checkpoint"),
        ("eval-seg", "segmentation metrics for a trained checkpoint"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common_flags(p)
        p.add_argument("--manifest")
        p.add_argument("--ckpt")
        p.add_argument("--split", choices=("train", "val", "test"))
        p.add_argument("--batch-size", type=int)

    p = sub.add_parser("cam", help="activation-map localization over a box-labeled corpus")
    _common_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--target-class", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("attn", help="attention maps for chosen query points")
    _common_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--points", help="'y,x' pairs joined by ';'")
    p.add_argument("--block", type=int)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common_flags(p)
    p.add_argument("--task", choices=("cls", "seg", "loc"))
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("stats", help="train-split pixel statistics of a corpus")
    _common_flags(p, out_required=False)
    p.add_argument("--manifest")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        file_values = parse_config_file(args.config) if args.config else {}
        flags = {
            key: val
            for key, val in vars(args).items()
            if key not in ("command", "config", "out") and val is not None
        }
        cfg = resolve_config(args.command, file_values, flags)

        if args.out is None and args.command != "stats":
            print("error: usage: --out DIR is required", file=sys.stderr)
            return USAGE_EXIT

        for var in _THREAD_VARS:
            os.environ[var] = str(cfg["threads"])
        from . import commands  # numpy loads here, after the env is pinned

        out = None
        if args.out is not None:
            if args.command == "synth":
                # a corpus directory, not a run directory; still records its config
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "config.resolved").write_text(render_config(cfg))
            else:
                out = make_run_dir(args.out, cfg)
        return commands.run(cfg, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT
    except XrayMimError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
