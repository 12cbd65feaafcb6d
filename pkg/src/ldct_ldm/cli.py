"""Command-line entry point: ``ldct-ldm <subcommand> [--config PATH] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import dump, load_config
from .errors import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, ConfigError, MissingPrerequisite, NumericError

log = logging.getLogger("ldct_ldm")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set ldm.steps=500 (repeatable)")
    common.add_argument("--seed", type=int, help="set every seed in the config")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--verbose", action="store_true", help="debug logging; write the sampling trace")

    parser = argparse.ArgumentParser(prog="ldct-ldm", description="Latent diffusion LDCT denoising pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic phantom dataset")
    sub.add_parser("train-ae", parents=[common], help="train the autoencoder")
    sub.add_parser("train-ldm", parents=[common], help="train the latent denoiser (needs train-ae)")
    p = sub.add_parser("denoise", parents=[common], help="denoise an image set and time it")
    p.add_argument("--input", help="image set to denoise (default: test-split LD images)")
    p.add_argument("--output", help="output image set (default: <reports>/denoised-<kind>)")
    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/LPIPS report")
    p.add_argument("--pred", help="predicted image set (default: <reports>/denoised-<kind>)")
    p.add_argument("--ref", help="reference image set (default: test-split FD images)")
    p.add_argument("--name", default="report", help="report file stem")
    sub.add_parser("ablate", parents=[common], help="P-AE x Q-SP ablation grid")
    p = sub.add_parser("dump-schedule", parents=[common], help="print the noise schedule table")
    p.add_argument("--output", help="write the table here instead of stdout")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, env=os.environ)
    cmd = args.command
    if cmd == "gen-data":
        pipeline.cmd_gen_data(cfg, args.force)
    elif cmd == "train-ae":
        pipeline.cmd_train_ae(cfg, args.force)
    elif cmd == "train-ldm":
        pipeline.cmd_train_ldm(cfg, args.force)
    elif cmd == "denoise":
        print(pipeline.cmd_denoise(cfg, args.input, args.output, args.verbose))
    elif cmd == "eval":
        report = pipeline.cmd_eval(cfg, args.pred, args.ref, args.name)
        print(pipeline.format_table([("denoised", report)]), end="")
    elif cmd == "ablate":
        cells = pipeline.cmd_ablate(cfg, args.force)
        print(pipeline.ablation_table(cells), end="")
    elif cmd == "dump-schedule":
        text = pipeline.cmd_dump_schedule(cfg, args.output)
        if args.output is None:
            print(text, end="")
    elif cmd == "show-config":
        print(dump(cfg), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except MissingPrerequisite as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_MISSING
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, FileExistsError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
