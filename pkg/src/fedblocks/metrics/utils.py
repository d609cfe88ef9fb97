# Metrics - Utils

# Copyright (C) 2026   fedblocks developers

import pandas as pd


def prepend_info(df: pd.DataFrame, **kwargs) -> pd.DataFrame:
    """Add constant columns in front of ``df``, e.g. ``config="5-5-0"``."""
    nargs = len(kwargs)
    df = df.copy()
    for key, val in kwargs.items():
        if key in df.columns:
            raise ValueError(f"Column {key} already exist in df.")
        df[key] = val
    return df[[*df.columns[-nargs:], *df.columns[:-nargs]]]
