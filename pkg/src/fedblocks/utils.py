# utils.py - Shared helpers for seeds and report files.

# Copyright (C) 2026   fedblocks developers

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Independent seed axes; changing one axis never perturbs another.
SEED_AXES = {
    "model_init": 0,
    "data": 1,
    "partition": 2,
    "modality_assignment": 3,
    "client": 4,
    "participation": 5,
}


def derive_seed(master: int, axis: str, *index: int) -> int:
    """Derive a 32-bit sub-seed from a master seed.

    The sub-seed is the first word of
    ``SeedSequence([master, SEED_AXES[axis], *index]).generate_state(1)``.

    Args:
        master: The experiment seed.
        axis: One of :data:`SEED_AXES`.
        *index: Extra entropy, e.g. the client id for the ``client`` axis.

    Returns:
        int: A non-negative seed usable with ``numpy.random.default_rng``.
    """
    if axis not in SEED_AXES:
        raise ValueError(f"Unknown seed axis {axis!r}, choose from {sorted(SEED_AXES)}")
    sequence = np.random.SeedSequence([int(master), SEED_AXES[axis], *map(int, index)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def custom_json(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, np.integer):
        return int(obj)
    elif np.isscalar(obj):
        return float(obj)
    else:
        return str(obj)


def write_json(path: Path, data: Mapping[str, Any]) -> Path:
    """Write ``data`` with a ``format_version`` key, sorted keys and a trailing newline."""
    payload = {"format_version": FORMAT_VERSION, **data}
    path.write_text(json.dumps(payload, default=custom_json, indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def write_csv(path: Path, df: pd.DataFrame, float_format: str = "%.10g") -> Path:
    """Write a report table preceded by a ``# format_version=N`` comment line."""
    with open(path, "w", newline="") as f:
        f.write(f"# format_version={FORMAT_VERSION}\n")
        df.to_csv(f, index=False, float_format=float_format, lineterminator="\n")
    logger.debug(f"Wrote {path} ({len(df)} rows)")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation; ``nan`` for an empty sequence."""
    if len(values) == 0:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def compare_report_dirs(dir1: Path, dir2: Path, names: Iterable[str]) -> list[str]:
    """Byte-compare report files present in either directory.

    Returns:
        list[str]: Names that differ or exist in only one directory.
    """
    differences = []
    for name in names:
        a, b = Path(dir1) / name, Path(dir2) / name
        if not a.exists() and not b.exists():
            continue
        if a.exists() != b.exists() or a.read_bytes() != b.read_bytes():
            differences.append(name)
    return differences
