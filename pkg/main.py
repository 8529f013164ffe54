#!/usr/bin/env python3
"""
NASA Occupancy Main Script - command-line entry for data generation, training,
evaluation, tracking and reports
"""

import argparse
import asyncio
import sys
from pathlib import Path
from typing import List, Sequence

from dotenv import load_dotenv

from runners.lead_runner import LeadRunner
from tools.occmodels import MODEL_KINDS
from utils.config import load_config
from utils.errors import EXIT_USAGE, NasaOccError, UsageError
from utils.logger import setup_logger

# Load environment variables
load_dotenv()

logger = setup_logger(__name__)

COMMANDS = ("gen-data", "train", "eval", "track", "report")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting"""

    def error(self, message):
        raise UsageError(message)


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {text!r}")
    return key.strip(), value


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="nasa-occ", description="Neural articulated occupancy models and tracking")
    commands = parser.add_subparsers(dest="command", metavar="{" + "|".join(COMMANDS) + "}")

    def command(name: str, help_text: str) -> ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, help="key=value run configuration file")
        sub.add_argument("--out", type=Path, required=True, help="output directory; nothing is written outside it")
        sub.add_argument("--threads", type=int, help="worker pool size (default NASAOCC_THREADS or all cores)")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override one config value, e.g. train.iterations=200")
        sub.add_argument("--quiet", action="store_true", help="hide progress bars")
        return sub

    command("gen-data", "generate the synthetic corpus and its manifest")

    train = command("train", "train one occupancy model on a corpus")
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--model", choices=MODEL_KINDS, required=True)
    train.add_argument("--lambda-weights", type=float, help="weight of the skinning-weight loss")
    train.add_argument("--iterations", type=int)

    evaluate = command("eval", "evaluate a checkpoint on the test split")
    evaluate.add_argument("--corpus", type=Path, required=True)
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=Path)
    source.add_argument("--oracle", action="store_true", help="evaluate the analytic body itself")

    track = command("track", "track a held-out sequence from its point clouds")
    track.add_argument("--corpus", type=Path, required=True, help="corpus holding the ground-truth sequence")
    track.add_argument("--checkpoint", type=Path, required=True)
    track.add_argument("--clouds", type=Path, help="corpus-format file with the per-frame clouds (default --corpus)")
    track.add_argument("--no-prior", action="store_true", help="drop the pose prior (w_prior = 0)")
    track.add_argument("--no-smoothing", action="store_true", help="evaluate occupancy at the data points (S = 1)")

    report = command("report", "compare metrics CSVs of several models")
    report.add_argument("inputs", nargs="*", type=Path, help="metrics_<model>.csv files")
    return parser


def collect_overrides(args) -> dict:
    overrides = dict(_parse_override(item) for item in args.overrides)
    if getattr(args, "lambda_weights", None) is not None:
        overrides["train.lambda_weights"] = args.lambda_weights
    if getattr(args, "iterations", None) is not None:
        overrides["train.iterations"] = args.iterations
    if getattr(args, "no_prior", False):
        overrides["track.w_prior"] = 0.0
    if getattr(args, "no_smoothing", False):
        overrides["track.smoothing"] = False
    return overrides


class NasaOccSystem:
    def __init__(self, args):
        self.args = args
        self.runner = None

    async def initialize(self):
        """Load configuration and start the lead runner"""
        logger.info(f"Initializing nasa-occ {self.args.command}")
        if self.args.threads is not None and self.args.threads < 1:
            raise UsageError("--threads must be at least 1")

        config = load_config(self.args.config, collect_overrides(self.args))
        self.runner = LeadRunner(config, self.args.out, self.args.threads, progress=not self.args.quiet)
        await self.runner.initialize()

    async def run(self):
        args = self.args
        if args.command == "gen-data":
            return await self.runner.generate_data()
        if args.command == "train":
            return await self.runner.train(args.model, args.corpus)
        if args.command == "eval":
            return await self.runner.evaluate(None if args.oracle else args.checkpoint, args.corpus)
        if args.command == "track":
            return await self.runner.track(args.checkpoint, args.corpus, args.clouds)
        return await self.runner.report(args.inputs)

    async def cleanup(self):
        """Cleanup resources"""
        if self.runner:
            await self.runner.cleanup()


async def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code"""
    system = None
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")

        system = NasaOccSystem(args)
        await system.initialize()
        await system.run()
        logger.info(f"{args.command} completed")
        return 0

    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_USAGE

    except NasaOccError as e:
        print(f"Error [{e.code}]: {str(e)}", file=sys.stderr)
        logger.error(f"Main execution error: {str(e)}")
        return e.exit_code

    finally:
        if system:
            await system.cleanup()


def run(argv: List[str] | None = None) -> int:
    return asyncio.run(main(argv))


if __name__ == "__main__":
    sys.exit(run())
