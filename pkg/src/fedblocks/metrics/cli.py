import argparse
import json
import typing
from pathlib import Path

import pandas as pd

from ..errors import DataError
from ..utils import read_csv, write_csv
from .analysis import gains
from .utils import prepend_info


def compute_gains(
    fm: float,
    ph: float | None,
    phf: float | None,
    output: Path | None = None,
    json_output: bool = False,
    info: dict[str, typing.Any] | None = None,
):
    """Compute PH/PHF gains and PG from three final scores and print them."""
    from rich.console import Console
    from rich.table import Table

    report = gains(fm, ph, phf)
    if output is not None:
        df = pd.DataFrame([report.to_dict()])
        write_csv(output, prepend_info(df, **info) if info else df)

    if json_output:
        print(json.dumps(report.to_dict(), indent=4))
        return report

    table = Table(title="Personalization gains", header_style="bold magenta")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="green", justify="right")
    for key, value in report.to_dict().items():
        suffix = " %" if key.endswith("gain") or key == "pg" else ""
        table.add_row(key, "-" if value is None else f"{value:.4f}{suffix}")
    Console().print(table)
    return report


def get_gain_value(gains_file: Path, column: str, config: str | None = None, split: str | None = None, fusion: str | None = None):
    """Read one value from a ``gains.csv`` file, filtering rows by config, split and fusion."""
    from rich.console import Console

    if not gains_file.exists():
        raise DataError(f"Gains file not found: {gains_file}")
    df = read_csv(gains_file)
    if column not in df.columns:
        raise DataError(f"Column '{column}' is invalid. Choose from: {', '.join(df.columns)}")

    selected = df
    for key, value in (("config", config), ("split", split), ("fusion", fusion)):
        if value is not None:
            selected = selected[selected[key].astype(str) == value]
    if len(selected) != 1:
        raise DataError(f"Filters select {len(selected)} rows of {gains_file}, expected exactly one")

    value = selected[column].item()
    Console().print(f"[bold cyan]{column}[/bold cyan] = [bold white]{value}[/bold white]")
    return value


def add_arguments(parser: argparse.ArgumentParser):
    subparsers = parser.add_subparsers(dest="gains-command", help="Available commands")

    parser_compute = subparsers.add_parser("compute", help="Compute personalization gains", formatter_class=parser.formatter_class)
    parser_compute.add_argument("--fm", type=float, required=True, help="Final score of full-model aggregation")
    parser_compute.add_argument("--ph", type=float, help="Final score with private head")
    parser_compute.add_argument("--phf", type=float, help="Final score with private head and fusion")
    parser_compute.add_argument("--output", "-o", type=Path, help="Optional CSV file to write the gains to")
    parser_compute.add_argument("--json", dest="json_output", action="store_true", help="Print gains as JSON")

    parser_get = subparsers.add_parser("get", help="Get a value from a gains file", formatter_class=parser.formatter_class)
    parser_get.add_argument("--gains-file", "-f", type=Path, required=True, help="Path to gains CSV file")
    parser_get.add_argument("--column", "-c", type=str, default="pg", help="Column to retrieve (pg, ph_gain, S_FM, ...)")
    parser_get.add_argument("--config", type=str, help="Modality configuration, e.g. 5-5-0")
    parser_get.add_argument("--split", type=str, help="Label split (iid or niid)")
    parser_get.add_argument("--fusion", type=str, help="Fusion variant (concat or attention)")


def dispatch(args: dict[str, typing.Any]):
    command = args.pop("gains-command")
    if command == "compute":
        compute_gains(
            fm=args.pop("fm"), ph=args.pop("ph"), phf=args.pop("phf"), output=args.pop("output"), json_output=args.pop("json_output")
        )
    elif command == "get":
        get_gain_value(
            gains_file=args.pop("gains_file"),
            column=args.pop("column"),
            config=args.pop("config"),
            split=args.pop("split"),
            fusion=args.pop("fusion"),
        )
    else:
        raise ValueError(f"Unknown command: {command}")
