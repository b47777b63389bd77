"""Command-line entry point.

Subcommands: gen-data, train, infer, translate, evaluate. Every subcommand
accepts --config, --seed, and --out; flags override environment overrides
(PRIVSEG_*), which override the config file. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, DataError, NumericError
from .pipelines import (
    load_run_config,
    run_evaluate,
    run_gen_data,
    run_infer,
    run_train,
    run_translate,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to the JSON config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privseg",
        description=(
            "Lesion segmentation with a privileged training-only modality: "
            "train a diffusion translator plus predictor, then run source-only inference."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired-modality dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train one of the four experiment modes")
    _add_common(p)
    p.add_argument("--mode", help="metat2, unet_both, unet_source, or ddpm_unet")
    p.add_argument("--train-manifest", help="training dataset manifest or directory")

    p = sub.add_parser("infer", help="predict lesion masks for a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="training output directory")
    p.add_argument("--mode", help="mode the checkpoint was trained for")
    p.add_argument("--manifest", help="test dataset manifest or directory")

    p = sub.add_parser("translate", help="write synthetic target images for a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="training output directory")
    p.add_argument("--manifest", help="dataset manifest or directory")
    p.add_argument(
        "--overlays",
        action="store_true",
        help="also render source|synthetic|real comparison PNGs",
    )

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    _add_common(p)
    p.add_argument("--pred-dir", required=True, help="directory written by infer")
    p.add_argument("--manifest", help="test dataset manifest or directory")
    return parser


def _run_config(args: argparse.Namespace) -> "RunConfig":
    flags = {
        "seed": args.seed,
        "out_dir": args.out,
        "mode": getattr(args, "mode", None),
        "train_manifest": getattr(args, "train_manifest", None),
        "test_manifest": getattr(args, "manifest", None),
    }
    return load_run_config(args.config, flag_overrides=flags)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            if args.config is None:
                raise ConfigError("gen-data needs --config pointing to a SyntheticSpec JSON")
            if args.out is None:
                raise ConfigError("gen-data needs --out")
            run_gen_data(args.config, args.out, seed=args.seed)
        elif args.command == "train":
            run_train(_run_config(args))
        elif args.command == "infer":
            run_infer(_run_config(args), args.checkpoint)
        elif args.command == "translate":
            run_translate(_run_config(args), args.checkpoint, overlays=args.overlays)
        elif args.command == "evaluate":
            run_evaluate(_run_config(args), args.pred_dir)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
