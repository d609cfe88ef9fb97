# Experiment orchestration: config, runs, sweeps and replays

# Copyright (C) 2026   fedblocks developers

"""Configuration-driven experiments.

A run generates a synthetic dataset, splits it, partitions the training part
across clients, assigns modality subsets and trains one federation per
(aggregation mode, seed). Every sub-seed is derived from the seed listed in
the config with :func:`fedblocks.utils.derive_seed`, one independent axis per
purpose (dataset, partition, modality assignment, model init, clients).

Report files written by :func:`run` (all byte-identical across reruns):

* ``config.yaml``: the fully resolved configuration
* ``report.json``: final scores, gains, group scores and communication per mode
* ``scores.csv``: final score per (seed, mode)
* ``curves.csv``: seed-averaged score per (round, group, mode)
* ``gains.csv``: personalization gains, when FM and a personalized mode ran

Wall-clock timings go to ``timing.json``.
"""

import argparse
import copy
import itertools
import logging
import os
import tempfile
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import tqdm
import yaml

from .client import ClientState, TrainingConfig
from .data import (
    ModalityConfig,
    MultimodalDataset,
    PartitionPlan,
    SynthTask,
    TaskKind,
    apply_proportions,
    assign_modalities,
    dirichlet_partition,
    generate,
    iid_partition,
    train_val_split,
)
from .errors import ConfigError, FedBlocksError, SpecError, UndefinedGainError
from .metrics.analysis import (
    BYTES_PER_PARAMETER,
    FINAL_SCORE_RULE,
    GainReport,
    RoundMetrics,
    comm_cost,
    degradation,
    final_group_scores,
    final_score,
    gains,
    group_curves,
)
from .metrics.utils import prepend_info
from .model import FusionVariant, ModalityMask, ModelSpec, init_model
from .server import AggregationMode, AggregationPlan, Federation, block_sizes, run_federation
from .utils import FORMAT_VERSION, compare_report_dirs, derive_seed, mean_std, write_csv, write_json

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDBLOCKS_OUTPUT_ROOT"
REPORT_FILES = ("config.yaml", "report.json", "scores.csv", "curves.csv", "gains.csv")


@dataclass(frozen=True)
class TaskSection:
    kind: str = TaskKind.COMPLEMENTARY.value
    n_classes: int = 4
    input_dims: tuple[int, ...] = (8, 8)
    noise_scale: float = 0.2
    n_samples: int = 3000


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 16
    hidden_dim: int = 32
    fusion_dim: int = 32
    fusion: str = FusionVariant.CONCAT.value


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 10
    rounds: int = 60
    local_epochs: int = 1
    lr: float = 0.2
    batch_size: int = 32
    participation: float = 1.0
    broadcast_all: bool = False
    max_workers: int = 1


@dataclass(frozen=True)
class DataSection:
    split: str = "niid"
    alpha: float = 0.5
    stratified_iid: bool = False
    val_fraction: float = 0.2
    eval_scope: str = "server"


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    modality_config: str = "3-3-4"
    modes: tuple[str, ...] = ("FM", "PH", "PHF")
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_interval: int = 1
    final_window: int = 5
    checkpoint_interval: int = 0


SECTIONS: dict[str, type] = {
    "task": TaskSection,
    "model": ModelSection,
    "federation": FederationSection,
    "data": DataSection,
    "experiment": ExperimentSection,
}


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return str(value)
    if isinstance(default, tuple):
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
    return value


def _build_section(cls: type, data: Any, section: str):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(section, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    values = {}
    for name, f in known.items():
        default = f.default
        values[name] = _coerce(data[name], default, f"{section}.{name}") if name in data else default
    return cls(**values)


def set_dotted(data: dict, key: str, value: Any) -> dict:
    """Set ``data["section"]["field"] = value`` for ``key = "section.field"``."""
    section, _, name = key.partition(".")
    if not section or not name or "." in name:
        raise ConfigError(key, "override keys have the form section.key")
    target = data.setdefault(section, {})
    if target is None:
        target = data[section] = {}
    if not isinstance(target, dict):
        raise ConfigError(section, "expected a mapping")
    target[name] = value
    return data


def apply_overrides(data: Mapping[str, Any], overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    result = copy.deepcopy(dict(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError("--set", f"expected section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(key.strip(), f"cannot parse value {raw!r}: {e}") from e
        set_dotted(result, key.strip(), value)
    return result


def load_yaml(path: Path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"invalid YAML: {e}") from e
    except OSError as e:
        raise ConfigError(str(path), f"cannot read file: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return data


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment configuration. Every field has an explicit default."""

    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    data: DataSection = field(default_factory=DataSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        """Build a config from nested mappings.

        Raises:
            ConfigError: On unknown sections or keys, wrong types or invalid values.
                The error names the dotted path of the offending field.
        """
        data = dict(data)
        version = data.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError("format_version", f"unsupported version {version!r}")
        for section in data:
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section")
        return cls(**{name: _build_section(section_cls, data.get(name), name) for name, section_cls in SECTIONS.items()})

    @classmethod
    def from_file(cls, path: Path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        return cls.from_dict(apply_overrides(load_yaml(path), overrides))

    def to_dict(self) -> dict[str, Any]:
        def section(obj) -> dict[str, Any]:
            values = {f.name: getattr(obj, f.name) for f in fields(obj)}
            return {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}

        return {"format_version": FORMAT_VERSION, **{name: section(getattr(self, name)) for name in SECTIONS}}

    def save(self, path: Path) -> Path:
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None))
        return path

    def validate(self) -> None:
        try:
            self.synth_task()
        except (SpecError, ValueError) as e:
            raise ConfigError("task", str(e)) from e
        try:
            self.model_spec()
        except (SpecError, ValueError) as e:
            raise ConfigError("model", str(e)) from e
        self.training()

        fed = self.federation
        if fed.n_clients < 1:
            raise ConfigError("federation.n_clients", "must be at least 1")
        if fed.rounds < 1:
            raise ConfigError("federation.rounds", "must be at least 1")
        if not 0.0 < fed.participation <= 1.0:
            raise ConfigError("federation.participation", "must lie in (0, 1]")
        if fed.max_workers < 1:
            raise ConfigError("federation.max_workers", "must be at least 1")

        data = self.data
        if data.split not in ("iid", "niid"):
            raise ConfigError("data.split", f"expected 'iid' or 'niid', got {data.split!r}")
        if data.alpha <= 0:
            raise ConfigError("data.alpha", "must be positive")
        if not 0.0 < data.val_fraction < 1.0:
            raise ConfigError("data.val_fraction", "must lie in (0, 1)")
        if data.eval_scope not in ("server", "client"):
            raise ConfigError("data.eval_scope", f"expected 'server' or 'client', got {data.eval_scope!r}")

        exp = self.experiment
        if len(self.task.input_dims) != 2:
            raise ConfigError("task.input_dims", "a-b-c modality configurations need exactly two modalities")
        if self.modality_config().n_clients != fed.n_clients:
            raise ConfigError(
                "experiment.modality_config", f"{exp.modality_config} describes {self.modality_config().n_clients} clients, "
                f"federation.n_clients is {fed.n_clients}"
            )
        if not exp.modes:
            raise ConfigError("experiment.modes", "at least one mode is required")
        for i, mode in enumerate(exp.modes):
            try:
                AggregationMode.parse(mode)
            except ValueError as e:
                raise ConfigError(f"experiment.modes[{i}]", f"unknown mode {mode!r}") from e
        if len(set(self.modes())) != len(exp.modes):
            raise ConfigError("experiment.modes", "modes must be unique")
        if not exp.seeds or len(set(exp.seeds)) != len(exp.seeds):
            raise ConfigError("experiment.seeds", "need at least one seed, without duplicates")
        if exp.eval_interval < 1:
            raise ConfigError("experiment.eval_interval", "must be at least 1")
        if exp.final_window < 1:
            raise ConfigError("experiment.final_window", "must be at least 1")
        if exp.checkpoint_interval < 0:
            raise ConfigError("experiment.checkpoint_interval", "must be non-negative")

    def synth_task(self) -> SynthTask:
        t = self.task
        return SynthTask(TaskKind(t.kind), t.n_classes, t.input_dims, t.noise_scale, t.n_samples)

    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(self.task.input_dims, self.task.n_classes, m.embed_dim, m.hidden_dim, m.fusion_dim, FusionVariant(m.fusion))

    def training(self) -> TrainingConfig:
        f = self.federation
        return TrainingConfig(epochs=f.local_epochs, lr=f.lr, batch_size=f.batch_size)

    def modality_config(self) -> ModalityConfig:
        return ModalityConfig.parse(self.experiment.modality_config)

    def modes(self) -> list[AggregationMode]:
        return [AggregationMode.parse(m) for m in self.experiment.modes]


@dataclass
class SeedContext:
    """Data and initial model shared by all modes of one seed."""

    seed: int
    train: MultimodalDataset
    validation: MultimodalDataset
    partition: PartitionPlan
    masks: list[ModalityMask]
    client_validation: dict[int, np.ndarray]
    initial_seed: int


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedContext:
    dataset = generate(config.synth_task(), derive_seed(seed, "data"))
    train_idx, val_idx = train_val_split(dataset.labels, config.data.val_fraction, derive_seed(seed, "data", 1))
    train, validation = dataset.subset(train_idx), dataset.subset(val_idx)

    n_clients = config.federation.n_clients
    if config.data.split == "niid":
        partition = dirichlet_partition(train.labels, n_clients, config.data.alpha, derive_seed(seed, "partition"))
        val_partition = apply_proportions(validation.labels, partition, derive_seed(seed, "partition", 1))
    else:
        stratified = config.data.stratified_iid
        partition = iid_partition(train.labels, n_clients, derive_seed(seed, "partition"), stratified)
        val_partition = iid_partition(validation.labels, n_clients, derive_seed(seed, "partition", 1), stratified)

    masks = assign_modalities(config.modality_config(), n_clients, derive_seed(seed, "modality_assignment"))
    logger.debug(f"Seed {seed}: train sizes {partition.n_samples}, groups {[m.label for m in masks]}")
    return SeedContext(
        seed=seed,
        train=train,
        validation=validation,
        partition=partition,
        masks=masks,
        client_validation=dict(enumerate(val_partition.indices)),
        initial_seed=derive_seed(seed, "model_init"),
    )


@dataclass
class RunResult:
    seed: int
    mode: AggregationMode
    history: list[RoundMetrics]
    plans: list[AggregationPlan]
    final_score: float
    final_accuracy: float
    group_final: dict[str, float]
    comm_params: int
    plan_comm_params: int
    seconds: float = 0.0


def build_federation(config: ExperimentConfig, context: SeedContext, mode: AggregationMode) -> Federation:
    clients = [
        ClientState(client_id=c, mask=context.masks[c], shard=context.partition.indices[c], seed=derive_seed(context.seed, "client", c))
        for c in range(config.federation.n_clients)
    ]
    fed = config.federation
    return Federation(
        spec=config.model_spec(),
        train=context.train,
        clients=clients,
        mode=mode,
        hyper=config.training(),
        rounds=fed.rounds,
        validation=context.validation,
        eval_scope=config.data.eval_scope,  # type: ignore[arg-type]
        client_validation=context.client_validation,
        eval_interval=config.experiment.eval_interval,
        participation=fed.participation,
        broadcast_all=fed.broadcast_all,
        max_workers=fed.max_workers,
        seed=context.seed,
    )


def run_single(
    config: ExperimentConfig,
    context: SeedContext,
    mode: AggregationMode,
    checkpoint_dir: Path | None = None,
    progress: bool = False,
) -> RunResult:
    """One federation for one (seed, mode)."""
    tic = time.perf_counter()
    federation = build_federation(config, context, mode)
    initial = init_model(federation.spec, context.initial_seed)
    state = run_federation(federation, initial, checkpoint_dir, config.experiment.checkpoint_interval, progress=progress)
    window = config.experiment.final_window
    history = state.history
    return RunResult(
        seed=context.seed,
        mode=mode,
        history=history,
        plans=state.plans,
        final_score=final_score(history, window),
        final_accuracy=float(np.mean([m.global_accuracy for m in history[-window:]])),
        group_final=final_group_scores(history, window),
        comm_params=sum(state.comm_history),
        plan_comm_params=comm_cost(state.plans, block_sizes(federation.spec)),
        seconds=time.perf_counter() - tic,
    )


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list[RunResult]
    scores: pd.DataFrame
    curves: pd.DataFrame
    gains: GainReport | None
    seed_gains: dict[int, GainReport]
    wall_clock: float
    output_dir: Path | None = None

    def mean_scores(self) -> dict[str, float]:
        return {mode: float(df["final_score"].mean()) for mode, df in self.scores.groupby("mode", sort=False)}

    def gains_table(self) -> pd.DataFrame | None:
        if self.gains is None:
            return None
        cfg = self.config
        df = pd.DataFrame([self.gains.to_dict()])
        return prepend_info(
            df, dataset=cfg.task.kind, config=str(cfg.modality_config()), split=cfg.data.split, fusion=cfg.model.fusion
        )

    def to_dict(self) -> dict[str, Any]:
        window = self.config.experiment.final_window
        modes: dict[str, Any] = {}
        for mode in self.config.modes():
            runs = [r for r in self.runs if r.mode is mode]
            mean, std = mean_std([r.final_score for r in runs])
            groups = sorted({g for r in runs for g in r.group_final})
            modes[mode.value] = {
                "final_score_mean": mean,
                "final_score_std": std,
                "final_accuracy_mean": mean_std([r.final_accuracy for r in runs])[0],
                "per_seed": {str(r.seed): r.final_score for r in runs},
                "group_final": {g: mean_std([r.group_final[g] for r in runs if g in r.group_final])[0] for g in groups},
                "plan_comm_params": {str(r.seed): r.plan_comm_params for r in runs},
                "comm_bytes": {str(r.seed): r.comm_params * BYTES_PER_PARAMETER for r in runs},
            }
        return {
            "config": self.config.to_dict(),
            "final_score_rule": FINAL_SCORE_RULE.format(window=window),
            "missing_rate": self.config.modality_config().missing_rate,
            "modes": modes,
            "gains": self.gains.to_dict() if self.gains else None,
            "seed_gains": {str(s): g.to_dict() for s, g in sorted(self.seed_gains.items())},
        }


def _gains_or_none(scores: Mapping[AggregationMode, float]) -> GainReport | None:
    if AggregationMode.FM not in scores or len(scores) < 2:
        return None
    try:
        return gains(scores[AggregationMode.FM], scores.get(AggregationMode.PH), scores.get(AggregationMode.PHF))
    except UndefinedGainError as e:
        logger.warning(f"Gains omitted: {e}")
        return None


def summarize(config: ExperimentConfig, runs: list[RunResult], wall_clock: float) -> ExperimentReport:
    scores = pd.DataFrame(
        [
            {
                "seed": r.seed,
                "mode": r.mode.value,
                "final_score": r.final_score,
                "final_accuracy": r.final_accuracy,
                "comm_params": r.comm_params,
                "plan_comm_params": r.plan_comm_params,
            }
            for r in runs
        ],
        columns=["seed", "mode", "final_score", "final_accuracy", "comm_params", "plan_comm_params"],
    )

    frames = []
    for r in runs:
        curve = group_curves({r.mode.value: r.history})
        overall = pd.DataFrame(
            {"round": [m.round_index for m in r.history], "group": "all", "mode": r.mode.value, "score": [m.global_score for m in r.history]}
        )
        frames.append(pd.concat([curve, overall], ignore_index=True))
    curves = (
        pd.concat(frames, ignore_index=True)
        .groupby(["mode", "group", "round"], sort=True)["score"]
        .mean()
        .reset_index()[["round", "group", "mode", "score"]]
    )

    mean_by_mode = {mode: float(np.mean([r.final_score for r in runs if r.mode is mode])) for mode in config.modes()}
    seed_gains = {}
    for seed in config.experiment.seeds:
        report = _gains_or_none({r.mode: r.final_score for r in runs if r.seed == seed})
        if report is not None:
            seed_gains[seed] = report
    return ExperimentReport(config, runs, scores, curves, _gains_or_none(mean_by_mode), seed_gains, wall_clock)


def write_report(report: ExperimentReport, output_dir: Path) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    report.config.save(output_dir / "config.yaml")
    write_json(output_dir / "report.json", report.to_dict())
    write_csv(output_dir / "scores.csv", report.scores)
    write_csv(output_dir / "curves.csv", report.curves)
    table = report.gains_table()
    if table is not None:
        write_csv(output_dir / "gains.csv", table)
    elif (output_dir / "gains.csv").exists():
        (output_dir / "gains.csv").unlink()
    write_json(
        output_dir / "timing.json",
        {"wall_clock_seconds": report.wall_clock, "runs": {f"{r.mode.value}-seed{r.seed}": r.seconds for r in report.runs}},
    )
    report.output_dir = output_dir
    logger.info(f"Wrote report to {output_dir}")


def resolve_output_dir(output: Path | None, name: str) -> Path:
    if output is not None:
        return Path(output)
    return Path(os.getenv(OUTPUT_ROOT_ENV, "results")) / name


def run(config: ExperimentConfig, output_dir: Path | None = None, progress: bool = True) -> ExperimentReport:
    """Run every (seed, mode) of ``config`` and write the report files to ``output_dir``.

    Args:
        config: The resolved configuration.
        output_dir: Where report files go; nothing is written when ``None``.
        progress: Show progress bars.

    Returns:
        ExperimentReport: Scores, curves and gains of the experiment.

    Raises:
        FedBlocksError: Protocol and data errors surface with round and client context.
    """
    tic = time.perf_counter()
    modes = config.modes()
    logger.info(
        f"Experiment '{config.experiment.name}': {config.task.kind} task, {config.experiment.modality_config} "
        f"({config.modality_config().missing_rate:.0%} missing), {config.data.split}, {config.model.fusion} fusion, "
        f"modes {[m.value for m in modes]}, seeds {list(config.experiment.seeds)}"
    )
    runs: list[RunResult] = []
    jobs = [(seed, mode) for seed in config.experiment.seeds for mode in modes]
    context: SeedContext | None = None
    for seed, mode in tqdm.tqdm(jobs, desc="runs", disable=not progress):
        if context is None or context.seed != seed:
            context = prepare_seed(config, seed)
        checkpoint_dir = None
        if output_dir is not None and config.experiment.checkpoint_interval > 0:
            checkpoint_dir = Path(output_dir) / "checkpoints" / f"{mode.value}-seed{seed}"
        result = run_single(config, context, mode, checkpoint_dir, progress=progress)
        logger.info(f"{mode.value} seed {seed}: final macro-F1 {result.final_score:.4f}")
        runs.append(result)

    report = summarize(config, runs, time.perf_counter() - tic)
    if report.gains is not None:
        g = report.gains
        logger.info(
            "Gains: " + ", ".join(f"{k}={v:.2f}%" for k, v in (("PH", g.ph_gain), ("PHF", g.phf_gain), ("PG", g.pg)) if v is not None)
        )
    if output_dir is not None:
        write_report(report, Path(output_dir))
    return report


@dataclass
class SweepCell:
    index: int
    overrides: dict[str, Any]
    status: str = "pending"
    report: ExperimentReport | None = None
    config: ExperimentConfig | None = None


@dataclass
class SweepResult:
    name: str
    cells: list[SweepCell]
    summary: pd.DataFrame
    output_dir: Path | None = None

    @property
    def failed(self) -> list[SweepCell]:
        return [c for c in self.cells if c.status != "ok"]

    @property
    def n_runs(self) -> int:
        return sum(len(c.config.experiment.modes) * len(c.config.experiment.seeds) for c in self.cells if c.status == "ok" and c.config)


def load_grid(path: Path) -> tuple[str, dict, dict[str, list]]:
    """Read a sweep grid file: ``name``, ``base`` (a config mapping) and ``grid`` (dotted key -> values)."""
    data = load_yaml(path)
    for key in data:
        if key not in ("name", "base", "grid"):
            raise ConfigError(key, "unknown grid file key")
    name = str(data.get("name") or Path(path).stem)
    base = data.get("base") or {}
    grid = data.get("grid") or {}
    if not isinstance(base, dict):
        raise ConfigError("base", "expected a mapping")
    if not isinstance(grid, dict):
        raise ConfigError("grid", "expected a mapping of section.key to lists of values")
    for key, values in grid.items():
        if not isinstance(values, list):
            raise ConfigError(f"grid.{key}", "expected a list of values")
    return name, base, grid


def grid_cells(grid: Mapping[str, list]) -> list[dict[str, Any]]:
    """Cartesian product of the grid in key order. An empty grid has no cells."""
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _summary_row(cell: SweepCell) -> dict[str, Any]:
    row: dict[str, Any] = {"cell": cell.index}
    cfg = cell.config
    if cfg is not None:
        row.update(task=cfg.task.kind, config=str(cfg.modality_config()), split=cfg.data.split, fusion=cfg.model.fusion)
    else:
        for key, dotted in (("task", "task.kind"), ("config", "experiment.modality_config"), ("split", "data.split"), ("fusion", "model.fusion")):
            row[key] = cell.overrides.get(dotted)
    scores = cell.report.mean_scores() if cell.report else {}
    for mode in ("FM", "PH", "PHF"):
        row[mode] = scores.get(mode, np.nan)
    g = cell.report.gains if cell.report else None
    row["ph_gain"] = g.ph_gain if g and g.ph_gain is not None else np.nan
    row["phf_gain"] = g.phf_gain if g and g.phf_gain is not None else np.nan
    row["pg"] = g.pg if g and g.pg is not None else np.nan
    row["status"] = cell.status
    return row


SUMMARY_COLUMNS = ["cell", "task", "config", "split", "fusion", "FM", "PH", "PHF", "ph_gain", "phf_gain", "pg", "status"]


def summary_json(name: str, summary: pd.DataFrame) -> dict[str, Any]:
    """Nested task -> split -> fusion -> config table plus degradation relative to ``0-0-10``."""
    table: dict[str, Any] = {}
    ok = summary[summary["status"] == "ok"]
    for row in ok.itertuples(index=False):
        leaf = table.setdefault(str(row.task), {}).setdefault(str(row.split), {}).setdefault(str(row.fusion), {})
        leaf[str(row.config)] = {k: (None if pd.isna(v) else float(v)) for k, v in (("FM", row.FM), ("PH", row.PH), ("PHF", row.PHF), ("pg", row.pg))}

    degradations: dict[str, Any] = {}
    for task, splits in table.items():
        for split, fusions in splits.items():
            for fusion, configs in fusions.items():
                reference = configs.get("0-0-10")
                if reference is None:
                    continue
                for mode in ("FM", "PH", "PHF"):
                    if not reference.get(mode):
                        continue
                    per_config = {
                        cfg: degradation(reference[mode], values[mode])
                        for cfg, values in configs.items()
                        if cfg != "0-0-10" and values.get(mode) is not None
                    }
                    degradations.setdefault(task, {}).setdefault(split, {}).setdefault(fusion, {})[mode] = per_config
    return {"name": name, "table": table, "degradation": degradations, "rows": summary.to_dict(orient="records")}


def sweep(grid_file: Path, output_root: Path | None = None, jobs: int = 1) -> SweepResult:
    """Run every cell of a grid file and write ``summary.csv`` and ``summary.json``.

    Failing cells are recorded with status ``failed: <reason>``; the sweep continues.
    """
    name, base, grid = load_grid(grid_file)
    output = resolve_output_dir(output_root, name)
    cells = [SweepCell(index=i, overrides=o) for i, o in enumerate(grid_cells(grid))]
    logger.info(f"Sweep '{name}': {len(cells)} cells")

    def run_cell(cell: SweepCell) -> SweepCell:
        try:
            data = copy.deepcopy(base)
            for key, value in cell.overrides.items():
                set_dotted(data, key, value)
            cell.config = ExperimentConfig.from_dict(data)
            cell.report = run(cell.config, output / f"cell-{cell.index:03d}", progress=False)
            cell.status = "ok"
        except (FedBlocksError, ValueError, RuntimeError) as e:
            cell.status = f"failed: {e}"
            logger.warning(f"Sweep cell {cell.index} ({cell.overrides}) failed: {e}")
        return cell

    if jobs > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            cells = list(executor.map(run_cell, cells))
    else:
        cells = [run_cell(c) for c in tqdm.tqdm(cells, desc="cells", disable=not cells)]

    summary = pd.DataFrame([_summary_row(c) for c in cells], columns=SUMMARY_COLUMNS)
    output.mkdir(parents=True, exist_ok=True)
    write_csv(output / "summary.csv", summary)
    write_json(output / "summary.json", summary_json(name, summary))
    result = SweepResult(name, cells, summary, output)
    logger.info(f"Sweep '{name}' finished: {len(cells) - len(result.failed)} ok, {len(result.failed)} failed")
    return result


def replay(report_dir: Path, scratch_dir: Path | None = None) -> list[str]:
    """Rerun the configuration stored in ``report_dir`` and byte-compare the report files.

    Returns:
        list[str]: Names of files that differ or are missing; empty when identical.
    """
    report_dir = Path(report_dir)
    config = ExperimentConfig.from_file(report_dir / "config.yaml")
    with tempfile.TemporaryDirectory(dir=scratch_dir) as tmp:
        run(config, Path(tmp), progress=False)
        differences = compare_report_dirs(report_dir, Path(tmp), REPORT_FILES)
    if differences:
        logger.error(f"Replay of {report_dir} differs in: {', '.join(differences)}")
    else:
        logger.info(f"Replay of {report_dir} is byte-identical")
    return differences


def add_run_arguments(
    parser: argparse.ArgumentParser,
    extra_args_cb: Callable[[argparse.ArgumentParser], None] | None = None,
) -> None:
    """Add command-line arguments for a single experiment."""
    parser.add_argument("config", type=Path, help="Path to the YAML experiment configuration.")
    parser.add_argument("-o", "--output", type=Path, help=f"Report directory (default: ${OUTPUT_ROOT_ENV}/<name>).")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Override a config value."
    )
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars.")
    if extra_args_cb is not None:
        extra_args_cb(parser)


def add_sweep_arguments(
    parser: argparse.ArgumentParser,
    extra_args_cb: Callable[[argparse.ArgumentParser], None] | None = None,
) -> None:
    """Add command-line arguments for a grid sweep."""
    parser.add_argument("grid", type=Path, help="Path to the YAML grid file.")
    parser.add_argument("-o", "--output", type=Path, help=f"Sweep directory (default: ${OUTPUT_ROOT_ENV}/<name>).")
    parser.add_argument("-j", "--jobs", type=int, default=1, help="Number of grid cells run concurrently.")
    if extra_args_cb is not None:
        extra_args_cb(parser)


def add_replay_arguments(
    parser: argparse.ArgumentParser,
    extra_args_cb: Callable[[argparse.ArgumentParser], None] | None = None,
) -> None:
    """Add command-line arguments for replaying a report."""
    parser.add_argument("report_dir", type=Path, help="Directory written by a previous run.")
    if extra_args_cb is not None:
        extra_args_cb(parser)


def dispatch_run(args: dict) -> int:
    config = ExperimentConfig.from_file(args.pop("config"), args.pop("overrides"))
    output = resolve_output_dir(args.pop("output"), config.experiment.name)
    run(config, output, progress=not args.pop("no_progress"))
    return 0


def dispatch_sweep(args: dict) -> int:
    result = sweep(args.pop("grid"), args.pop("output"), jobs=args.pop("jobs"))
    return 2 if result.failed else 0


def dispatch_replay(args: dict) -> int:
    return 2 if replay(args.pop("report_dir")) else 0
