import json
import typing
from pathlib import Path

import numpy as np
from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .model import BlockId, load_blocks, read_header
from .utils import custom_json


def checkpoint_info(filename: Path, json_output: bool = False) -> dict[str, typing.Any]:
    """Print the model dimensions and per-block layout of a checkpoint."""
    console = Console()

    header, data_offset = read_header(filename)
    store = load_blocks(filename)

    blocks = []
    for entry in header["blocks"]:
        vector = store.blocks[BlockId.parse(entry["id"])]
        blocks.append(
            {
                "id": entry["id"],
                "count": entry["count"],
                "offset": entry["offset"],
                "l2_norm": float(np.linalg.norm(vector)),
            }
        )

    data = {
        "filename": str(filename),
        "spec": store.spec.to_dict(),
        "seed": store.seed,
        "data_offset_bytes": data_offset,
        "n_parameters": sum(b["count"] for b in blocks),
        "blocks": blocks,
        "metadata": store.metadata,
    }

    if json_output:
        print(json.dumps(data, default=custom_json, indent=4, sort_keys=True))
        return data

    console.print(Panel(f"[bold blue]Checkpoint Analysis[/bold blue]\n[green]{filename}[/green]", expand=False))

    info_table = Table(title="Model", box=box.SIMPLE_HEAVY, show_header=True, header_style="bold magenta")
    info_table.add_column("Property", style="cyan")
    info_table.add_column("Value", style="white")

    spec = store.spec
    info_table.add_row("Input dims", ", ".join(map(str, spec.input_dims)))
    info_table.add_row("Classes", str(spec.n_classes))
    info_table.add_row("Embed / hidden / fusion", f"{spec.embed_dim} / {spec.hidden_dim} / {spec.fusion_dim}")
    info_table.add_row("Fusion", spec.fusion.value)
    info_table.add_row("Seed", "-" if store.seed is None else str(store.seed))
    info_table.add_row("Parameters", str(data["n_parameters"]))
    for key, value in sorted(store.metadata.items()):
        info_table.add_row(f"meta: {key}", str(value))
    console.print(info_table)

    block_table = Table(title="Blocks", box=box.ROUNDED, header_style="bold magenta", border_style="dim")
    block_table.add_column("Block", style="cyan")
    block_table.add_column("Count", justify="right", style="green")
    block_table.add_column("Offset", justify="right", style="green")
    block_table.add_column("L2 norm", justify="right", style="green")
    for b in blocks:
        block_table.add_row(b["id"], str(b["count"]), str(b["offset"]), f"{b['l2_norm']:.6f}")
    console.print(block_table)

    return data
