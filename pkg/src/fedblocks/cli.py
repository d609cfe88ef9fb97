"""fedblocks simulates block-wise federated learning of multimodal late-fusion models."""

import argparse
import logging
from importlib.metadata import metadata
from pathlib import Path
from typing import Optional, Sequence

from rich.logging import RichHandler
from rich_argparse import RichHelpFormatter

from . import data, experiment, info, metrics
from .errors import ConfigError, FedBlocksError


def version_info():
    import sys

    import numpy as np
    import pandas as pd
    import sklearn
    import yaml
    from rich import box
    from rich.console import Console
    from rich.table import Table

    console = Console()

    meta = metadata("fedblocks")
    python_version = sys.version.split()[0]

    table = Table(title="fedblocks Environment", box=box.ROUNDED, show_lines=True, header_style="bold magenta")
    table.add_column("Package", style="cyan", no_wrap=True)
    table.add_column("Version", style="green", justify="right")

    table.add_row("fedblocks", meta["Version"])
    table.add_row("Python", python_version)
    table.add_row("Numpy", np.__version__)
    table.add_row("Pandas", pd.__version__)
    table.add_row("scikit-learn", sklearn.__version__)
    table.add_row("PyYAML", yaml.__version__)

    console.print(table)


def add_extra_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--no-rich", action="store_true", help="Disable rich logging and use standard console output.")
    parser.add_argument("--logfile", type=Path, help="Path to a log file to save logs (optional).")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging")


def setup_parser():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=RichHelpFormatter)
    parser.add_argument("--version", action="store_true")

    subparsers = parser.add_subparsers(dest="command")

    run_parser = subparsers.add_parser("run", help="Run one experiment from a YAML config", formatter_class=parser.formatter_class)
    experiment.add_run_arguments(run_parser, extra_args_cb=add_extra_arguments)

    sweep_parser = subparsers.add_parser("sweep", help="Run a grid of experiments", formatter_class=parser.formatter_class)
    experiment.add_sweep_arguments(sweep_parser, extra_args_cb=add_extra_arguments)

    replay_parser = subparsers.add_parser(
        "replay", help="Re-run a report's config and compare outputs byte by byte", formatter_class=parser.formatter_class
    )
    experiment.add_replay_arguments(replay_parser, extra_args_cb=add_extra_arguments)

    inspect_parser = subparsers.add_parser("inspect", help="Display information about a checkpoint", formatter_class=parser.formatter_class)
    inspect_parser.add_argument("file", type=Path, help="Checkpoint to display information about")
    inspect_parser.add_argument("--json", action="store_true", help="Output information in JSON format")

    synth_parser = subparsers.add_parser("synth", help="Export a synthetic multimodal dataset", formatter_class=parser.formatter_class)
    data.add_arguments(synth_parser, extra_args_cb=add_extra_arguments)

    gains_parser = subparsers.add_parser("gains", help="Compute or query personalization gains", formatter_class=parser.formatter_class)
    metrics.cli.add_arguments(gains_parser)

    return parser


def dispatch(parser: argparse.ArgumentParser, argv: Optional[Sequence[str]] = None) -> int:
    args = vars(parser.parse_args(argv))

    if args.pop("version"):
        version_info()
        return 0
    verbose = args.pop("verbose", False)
    level = logging.DEBUG if verbose else logging.INFO

    no_rich = args.pop("no_rich", False)
    handlers: list[logging.Handler] = [logging.StreamHandler()] if no_rich else [RichHandler()]

    logfile = args.pop("logfile", None)
    if logfile:
        handlers.append(logging.FileHandler(logfile))

    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s", handlers=handlers)
    command = args.pop("command")
    logger = logging.getLogger(__name__)
    try:
        if command == "run":
            return experiment.dispatch_run(args)
        elif command == "sweep":
            return experiment.dispatch_sweep(args)
        elif command == "replay":
            return experiment.dispatch_replay(args)
        elif command == "inspect":
            info.checkpoint_info(args.pop("file"), json_output=args.pop("json"))
        elif command == "synth":
            data.dispatch(args)
        elif command == "gains":
            metrics.cli.dispatch(args)
        else:
            logger.error(f"Unknown command {command}")
            parser.print_help()
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1
    except (FedBlocksError, ValueError, RuntimeError, OSError) as e:
        logger.error(e, exc_info=verbose, stacklevel=2)
        return 2

    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = setup_parser()
    return dispatch(parser, argv)
