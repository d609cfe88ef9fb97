# Copyright (C) 2026   fedblocks developers

from . import analysis, cli, scores, utils
from .analysis import GainReport, RoundMetrics, comm_cost, final_score, gains, group_curves
from .scores import Scores, macro_f1, score_predictions

__all__ = [
    "analysis",
    "cli",
    "scores",
    "utils",
    "GainReport",
    "RoundMetrics",
    "Scores",
    "comm_cost",
    "final_score",
    "gains",
    "group_curves",
    "macro_f1",
    "score_predictions",
]
