# Round metrics, personalization gains and communication accounting

# Copyright (C) 2026   fedblocks developers

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from ..errors import DataError, UndefinedGainError
from .scores import Scores

if TYPE_CHECKING:
    from ..server import AggregationPlan

logger = logging.getLogger(__name__)

BYTES_PER_PARAMETER = 8
FINAL_SCORE_RULE = "mean global macro-F1 over the last {window} evaluation rounds"


@dataclass(frozen=True)
class ClientRecord:
    client_id: int
    group: str
    n_samples: int
    scores: Scores


def weighted_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or w.sum() <= 0:
        return float("nan")
    return float(np.dot(np.asarray(values, dtype=np.float64), w) / w.sum())


@dataclass(frozen=True)
class RoundMetrics:
    """Evaluation of one round.

    Group and global scores are sample-weighted means of the member clients'
    macro-F1, weighted by their training sample counts.
    """

    round_index: int
    mode: str
    clients: tuple[ClientRecord, ...]
    comm_params: int = 0
    train_loss: float = float("nan")

    @property
    def group_scores(self) -> dict[str, float]:
        groups: dict[str, list[ClientRecord]] = {}
        for record in sorted(self.clients, key=lambda r: r.client_id):
            groups.setdefault(record.group, []).append(record)
        return {
            group: weighted_mean([r.scores.macro_f1 for r in members], [r.n_samples for r in members])
            for group, members in sorted(groups.items())
        }

    @property
    def global_score(self) -> float:
        records = sorted(self.clients, key=lambda r: r.client_id)
        return weighted_mean([r.scores.macro_f1 for r in records], [r.n_samples for r in records])

    @property
    def global_accuracy(self) -> float:
        records = sorted(self.clients, key=lambda r: r.client_id)
        return weighted_mean([r.scores.accuracy for r in records], [r.n_samples for r in records])

    @property
    def comm_bytes(self) -> int:
        return self.comm_params * BYTES_PER_PARAMETER

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "mode": self.mode,
            "global_score": self.global_score,
            "global_accuracy": self.global_accuracy,
            "group_scores": self.group_scores,
            "comm_params": self.comm_params,
            "comm_bytes": self.comm_bytes,
            "train_loss": self.train_loss,
            "clients": {
                str(r.client_id): {"group": r.group, "n_samples": r.n_samples, **r.scores.to_dict()} for r in self.clients
            },
        }


@dataclass(frozen=True)
class GainReport:
    """Relative improvement (in percent) of the personalized modes over full-model aggregation.

    A mode that was not run has score and gain ``None``; ``pg`` is the maximum of the
    available gains.
    """

    s_fm: float
    s_ph: float | None
    s_phf: float | None
    ph_gain: float | None
    phf_gain: float | None
    pg: float | None

    def to_dict(self) -> dict:
        return {
            "S_FM": self.s_fm,
            "S_PH": self.s_ph,
            "S_PHF": self.s_phf,
            "ph_gain": self.ph_gain,
            "phf_gain": self.phf_gain,
            "pg": self.pg,
        }


def gains(s_fm: float, s_ph: float | None, s_phf: float | None) -> GainReport:
    """PH gain ``(S_PH - S_FM) / S_FM * 100``, PHF gain likewise, and their maximum.

    Raises:
        UndefinedGainError: If ``s_fm <= 0``.
    """
    if not s_fm > 0:
        raise UndefinedGainError(f"Gains are undefined for a full-model score of {s_fm}")

    def relative(s: float | None) -> float | None:
        return None if s is None else (s - s_fm) / s_fm * 100.0

    ph_gain, phf_gain = relative(s_ph), relative(s_phf)
    available = [g for g in (ph_gain, phf_gain) if g is not None]
    return GainReport(s_fm, s_ph, s_phf, ph_gain, phf_gain, max(available) if available else None)


def degradation(s_complete: float, s_missing: float) -> float:
    """Relative loss (percent) of a score when modalities go missing."""
    if not s_complete > 0:
        raise UndefinedGainError(f"Degradation is undefined for a reference score of {s_complete}")
    return (s_complete - s_missing) / s_complete * 100.0


def final_score(history: Sequence[RoundMetrics], window: int = 5) -> float:
    """Mean global score over the last ``window`` evaluated rounds."""
    if not history:
        raise DataError("No evaluation rounds recorded")
    tail = list(history)[-window:]
    return float(np.mean([m.global_score for m in tail]))


def final_group_scores(history: Sequence[RoundMetrics], window: int = 5) -> dict[str, float]:
    if not history:
        raise DataError("No evaluation rounds recorded")
    tail = list(history)[-window:]
    groups = sorted({g for m in tail for g in m.group_scores})
    return {g: float(np.mean([m.group_scores[g] for m in tail if g in m.group_scores])) for g in groups}


def group_curves(histories: Mapping[str, Sequence[RoundMetrics]] | Sequence[RoundMetrics]) -> pd.DataFrame:
    """Score-vs-round series per (modality group, mode).

    Args:
        histories: Round metrics of one run, or a mapping from mode to round metrics.

    Returns:
        pd.DataFrame: Columns ``round``, ``group``, ``mode``, ``score``; one row per
        evaluation round, group and mode, sorted by mode, group and round.
    """
    if not isinstance(histories, Mapping):
        runs: dict[str, Sequence[RoundMetrics]] = {}
        for m in histories:
            runs.setdefault(m.mode, []).append(m)  # type: ignore[attr-defined]
        histories = runs
    rows = [
        {"round": m.round_index, "group": group, "mode": mode, "score": score}
        for mode, history in histories.items()
        for m in history
        for group, score in m.group_scores.items()
    ]
    df = pd.DataFrame(rows, columns=["round", "group", "mode", "score"])
    return df.sort_values(["mode", "group", "round"], kind="stable").reset_index(drop=True)


def comm_cost(plans: Sequence["AggregationPlan"], block_sizes: Mapping) -> int:
    """Parameters exchanged over a plan history: every planned (block, client) pair moves
    the block down to the client and back up."""
    total = 0
    for plan in plans:
        for block_id, contributors in plan.entries.items():
            total += 2 * len(contributors) * int(block_sizes[block_id])
    return total


def comm_cost_by_mode(plans: Mapping[str, Sequence["AggregationPlan"]], block_sizes: Mapping) -> dict[str, int]:
    return {mode: comm_cost(history, block_sizes) for mode, history in plans.items()}
