# Synthetic multimodal data, label partitioning and modality assignment

# Copyright (C) 2026   fedblocks developers

import argparse
import json
import logging
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DataError, SpecError
from .model import ModalityMask
from .utils import FORMAT_VERSION

logger = logging.getLogger(__name__)

MAX_PARTITION_RETRIES = 100


class TaskKind(str, Enum):
    REDUNDANT = "redundant"
    COMPLEMENTARY = "complementary"


@dataclass(frozen=True)
class SynthTask:
    """A synthetic classification task observed through several modalities.

    ``redundant``: every modality is a noisy view of the same class prototype, so
    each modality alone determines the label.

    ``complementary``: each modality carries an independent latent component
    ``z_m`` and the label is ``sum(z_m) mod n_classes``. Any single modality is
    independent of the label.
    """

    kind: TaskKind
    n_classes: int
    input_dims: tuple[int, ...]
    noise_scale: float = 0.2
    n_samples: int = 3000

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", TaskKind(self.kind))
        except ValueError as e:
            raise SpecError(f"Unknown task kind {self.kind!r}") from e
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.n_classes < 2:
            raise SpecError(f"n_classes must be at least 2, got {self.n_classes}")
        if not self.input_dims:
            raise SpecError("A task needs at least one modality")
        if self.kind is TaskKind.COMPLEMENTARY and len(self.input_dims) < 2:
            raise SpecError("A complementary task needs at least two modalities")
        # Prototypes are rotated one-hot vectors, so every modality needs room for n_classes of them.
        if min(self.input_dims) < self.n_classes:
            raise SpecError(f"input_dims {self.input_dims} must each be >= n_classes ({self.n_classes})")
        if self.noise_scale < 0:
            raise SpecError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if self.n_samples < self.n_classes:
            raise SpecError(f"n_samples ({self.n_samples}) must be >= n_classes ({self.n_classes})")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "n_classes": self.n_classes,
            "input_dims": list(self.input_dims),
            "noise_scale": self.noise_scale,
            "n_samples": self.n_samples,
        }


@dataclass
class MultimodalDataset:
    """Per-modality feature matrices (samples in rows) and integer labels."""

    features: tuple[np.ndarray, ...]
    labels: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = tuple(np.asarray(x, dtype=np.float64) for x in self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for m, x in enumerate(self.features):
            if x.ndim != 2 or x.shape[0] != self.labels.shape[0]:
                raise DataError(f"Modality {m} has shape {x.shape}, expected ({self.labels.shape[0]}, d)")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.features)

    def subset(self, indices: np.ndarray) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(tuple(x[idx] for x in self.features), self.labels[idx], dict(self.metadata))

    def inputs(self, mask: ModalityMask, indices: np.ndarray | None = None) -> list[np.ndarray | None]:
        """Model inputs for the modalities in ``mask``; absent modalities are ``None``."""
        rows = slice(None) if indices is None else np.asarray(indices, dtype=np.int64)
        return [x[rows] if m in mask else None for m, x in enumerate(self.features)]

    def save(self, path: Path) -> Path:
        """Write features and labels to ``<path>`` (binary) and ``<path>.json`` (manifest).

        The binary holds every modality as little-endian float64, row-major, followed by
        the labels as little-endian int64.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        offsets = []
        offset = 0
        with open(path, "wb") as f:
            for x in self.features:
                offsets.append(offset)
                data = np.ascontiguousarray(x, dtype="<f8").tobytes()
                f.write(data)
                offset += len(data)
            labels_offset = offset
            f.write(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())

        manifest = {
            "format_version": FORMAT_VERSION,
            "data_file": path.name,
            "n_samples": self.n_samples,
            "input_dims": list(self.input_dims),
            "feature_offsets": offsets,
            "labels_offset": labels_offset,
            "class_counts": np.bincount(self.labels).tolist() if self.n_samples else [],
            **self.metadata,
        }
        manifest_path = path.with_name(path.name + ".json")
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.info(f"Saved dataset with {self.n_samples} samples to {path}")
        return manifest_path

    @classmethod
    def from_file(cls, path: Path) -> "MultimodalDataset":
        """Load a dataset from its manifest (``*.json``) or its binary file."""
        path = Path(path)
        manifest_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
        manifest = json.loads(manifest_path.read_text())
        raw = (manifest_path.parent / manifest["data_file"]).read_bytes()
        n = manifest["n_samples"]
        features = []
        for offset, dim in zip(manifest["feature_offsets"], manifest["input_dims"]):
            features.append(np.frombuffer(raw, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim).astype(np.float64))
        labels = np.frombuffer(raw, dtype="<i8", count=n, offset=manifest["labels_offset"]).astype(np.int64)
        skip = {"format_version", "data_file", "n_samples", "input_dims", "feature_offsets", "labels_offset", "class_counts"}
        return cls(tuple(features), labels, {k: v for k, v in manifest.items() if k not in skip})


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def class_prototypes(rng: np.random.Generator, n_classes: int, dim: int) -> np.ndarray:
    """Orthonormal class prototypes, one per row: rotated one-hot vectors."""
    return _random_rotation(rng, dim)[:n_classes]


def generate(task: SynthTask, seed: int) -> MultimodalDataset:
    """Sample a synthetic multimodal dataset.

    Args:
        task: The task description.
        seed: Seed for ``numpy.random.default_rng``; the same seed gives a bit-identical dataset.

    Returns:
        MultimodalDataset: Features per modality and labels in ``[0, n_classes)``.
    """
    rng = np.random.default_rng(seed)
    prototypes = [class_prototypes(rng, task.n_classes, dim) for dim in task.input_dims]
    n = task.n_samples

    if task.kind is TaskKind.REDUNDANT:
        labels = rng.integers(0, task.n_classes, size=n)
        latents = np.repeat(labels[:, None], task.n_modalities, axis=1)
    else:
        latents = rng.integers(0, task.n_classes, size=(n, task.n_modalities))
        labels = latents.sum(axis=1) % task.n_classes

    features = []
    for m, dim in enumerate(task.input_dims):
        noise = task.noise_scale * rng.standard_normal((n, dim))
        features.append(prototypes[m][latents[:, m]] + noise)

    logger.debug(f"Generated {task.kind.value} dataset: {n} samples, dims {task.input_dims}, seed {seed}")
    return MultimodalDataset(tuple(features), labels, {"task": task.to_dict(), "seed": int(seed)})


def train_val_split(labels: np.ndarray, val_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of sample indices into (train, validation), both sorted."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("Cannot split an empty label set")
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_val = int(round(val_fraction * idx.size))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint per-client sample indices.

    ``proportions`` holds the Dirichlet draw per class (rows ordered as ``classes``)
    when the plan came from :func:`dirichlet_partition`.
    """

    indices: tuple[np.ndarray, ...]
    classes: tuple[int, ...] = ()
    proportions: np.ndarray | None = None
    attempts: int = 1

    @property
    def n_clients(self) -> int:
        return len(self.indices)

    @property
    def n_samples(self) -> tuple[int, ...]:
        return tuple(int(idx.size) for idx in self.indices)

    def histograms(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """Per-client class counts, shape (n_clients, n_classes)."""
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[idx], minlength=n_classes) for idx in self.indices])

    def validate(self, n_total: int) -> None:
        """Check that client sets are pairwise disjoint and cover ``range(n_total)``."""
        joined = np.concatenate(self.indices) if self.indices else np.array([], dtype=np.int64)
        if joined.size != n_total or not np.array_equal(np.sort(joined), np.arange(n_total)):
            raise DataError("Partition is not a disjoint cover of the sample indices")


def _split_by_proportions(rng: np.random.Generator, idx: np.ndarray, proportions: np.ndarray) -> list[np.ndarray]:
    cuts = (np.cumsum(proportions) * idx.size).astype(np.int64)[:-1]
    return np.split(rng.permutation(idx), cuts)


def dirichlet_partition(labels: np.ndarray, n_clients: int = 10, alpha: float = 0.5, seed: int = 0) -> PartitionPlan:
    """Non-IID label partition with per-class Dirichlet proportions.

    For every class in ascending order the class indices are permuted and split at
    ``floor(cumsum(p) * n_k)`` with ``p ~ Dirichlet(alpha * 1)``. Attempt ``a`` uses
    ``default_rng([seed, a])``; a draw leaving any client empty is rejected and retried.

    Raises:
        DataError: On an empty label set, invalid arguments, or when
            ``MAX_PARTITION_RETRIES`` attempts all leave a client empty.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("Cannot partition an empty label set")
    if n_clients < 1:
        raise DataError(f"n_clients must be at least 1, got {n_clients}")
    if alpha <= 0:
        raise DataError(f"alpha must be positive, got {alpha}")

    classes = np.unique(labels)
    for attempt in range(MAX_PARTITION_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        proportions = np.zeros((classes.size, n_clients))
        for row, k in enumerate(classes):
            p = rng.dirichlet(alpha * np.ones(n_clients))
            proportions[row] = p
            for c, chunk in enumerate(_split_by_proportions(rng, np.flatnonzero(labels == k), p)):
                parts[c].append(chunk)
        indices = tuple(np.sort(np.concatenate(p)) for p in parts)
        if all(idx.size > 0 for idx in indices):
            if attempt:
                logger.debug(f"Dirichlet partition accepted after {attempt + 1} attempts")
            return PartitionPlan(indices, tuple(int(k) for k in classes), proportions, attempt + 1)

    raise DataError(f"Dirichlet partition left a client empty in {MAX_PARTITION_RETRIES} attempts (alpha={alpha})")


def apply_proportions(labels: np.ndarray, plan: PartitionPlan, seed: int = 0) -> PartitionPlan:
    """Split another label set (e.g. validation) with the class proportions of ``plan``.

    Clients may end up empty here; no rejection is applied.
    """
    if plan.proportions is None:
        raise DataError("Plan carries no class proportions")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(plan.n_clients)]
    for row, k in enumerate(plan.classes):
        for c, chunk in enumerate(_split_by_proportions(rng, np.flatnonzero(labels == k), plan.proportions[row])):
            parts[c].append(chunk)
    indices = tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts)
    return PartitionPlan(indices, plan.classes, plan.proportions)


def iid_partition(labels: np.ndarray, n_clients: int = 10, seed: int = 0, stratified: bool = False) -> PartitionPlan:
    """IID partition: a uniform random split, or round-robin within each class when ``stratified``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("Cannot partition an empty label set")
    if n_clients < 1:
        raise DataError(f"n_clients must be at least 1, got {n_clients}")
    if labels.size < n_clients:
        raise DataError(f"{labels.size} samples cannot cover {n_clients} clients")
    rng = np.random.default_rng(seed)
    if stratified:
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == k)) for k in np.unique(labels)])
        indices = tuple(np.sort(order[c::n_clients]) for c in range(n_clients))
    else:
        indices = tuple(np.sort(chunk) for chunk in np.array_split(rng.permutation(labels.size), n_clients))
    return PartitionPlan(indices, tuple(int(k) for k in np.unique(labels)))


_CONFIG_PATTERN = re.compile(r"^\s*(\d+)\s*[-–]\s*(\d+)\s*[-–]\s*(\d+)\s*$")


@dataclass(frozen=True)
class ModalityConfig:
    """``a-b-c`` client counts: modality 0 only, modality 1 only, both."""

    a: int
    b: int
    c: int

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 0:
            raise ConfigError("experiment.modality_config", f"counts must be non-negative, got {self}")
        if self.n_clients == 0:
            raise ConfigError("experiment.modality_config", "at least one client is required")

    @classmethod
    def parse(cls, text: str) -> "ModalityConfig":
        """Parse ``"3-3-4"`` (hyphen or en dash)."""
        match = _CONFIG_PATTERN.match(str(text))
        if match is None:
            raise ConfigError("experiment.modality_config", f"expected 'a-b-c', got {text!r}")
        return cls(*(int(g) for g in match.groups()))

    @property
    def n_clients(self) -> int:
        return self.a + self.b + self.c

    @property
    def missing_rate(self) -> float:
        return (self.a + self.b) / (2 * self.n_clients)

    def masks(self) -> list[ModalityMask]:
        """Masks in unshuffled order: ``a`` x {0}, ``b`` x {1}, ``c`` x {0, 1}."""
        return (
            [ModalityMask((True, False))] * self.a
            + [ModalityMask((False, True))] * self.b
            + [ModalityMask((True, True))] * self.c
        )

    def __str__(self) -> str:
        return f"{self.a}-{self.b}-{self.c}"


def assign_modalities(config: ModalityConfig, n_clients: int, seed: int) -> list[ModalityMask]:
    """Give exactly ``a`` clients modality 0, ``b`` modality 1 and ``c`` both, in seeded random order.

    Raises:
        ConfigError: If ``a + b + c != n_clients``.
    """
    if config.n_clients != n_clients:
        raise ConfigError("experiment.modality_config", f"{config} describes {config.n_clients} clients, federation has {n_clients}")
    masks = config.masks()
    order = np.random.default_rng(seed).permutation(n_clients)
    return [masks[i] for i in order]


def missing_rate(masks: Sequence[ModalityMask]) -> float:
    """Fraction of absent (client, modality) pairs."""
    if not masks:
        raise DataError("No client masks given")
    absent = sum(m.n_modalities - len(m.modalities) for m in masks)
    return absent / sum(m.n_modalities for m in masks)


def synth(
    kind: str,
    n_classes: int,
    input_dims: Sequence[int],
    noise_scale: float,
    n_samples: int,
    seed: int,
    output: Path,
) -> MultimodalDataset:
    """Generate a synthetic dataset and export it to ``output``."""
    task = SynthTask(TaskKind(kind), n_classes, tuple(input_dims), noise_scale, n_samples)
    dataset = generate(task, seed)
    dataset.save(output)
    return dataset


def add_arguments(
    parser: argparse.ArgumentParser,
    extra_args_cb: Callable[[argparse.ArgumentParser], None] | None = None,
) -> None:
    """Add command-line arguments for synthetic dataset export."""
    parser.add_argument("-o", "--output", type=Path, required=True, help="Path of the binary dataset file.")
    parser.add_argument("--kind", choices=[k.value for k in TaskKind], default=TaskKind.COMPLEMENTARY.value, help="Task family.")
    parser.add_argument("--n-classes", type=int, default=4, help="Number of classes.")
    parser.add_argument("--input-dims", type=int, nargs="+", default=[8, 8], help="Input width of every modality.")
    parser.add_argument("--noise-scale", type=float, default=0.2, help="Standard deviation of the Gaussian noise.")
    parser.add_argument("--n-samples", type=int, default=3000, help="Number of samples.")
    parser.add_argument("--seed", type=int, default=0, help="Random seed.")
    if extra_args_cb is not None:
        extra_args_cb(parser)


def dispatch(args: dict):
    """Dispatch function for synthetic dataset export."""
    synth(
        kind=args.pop("kind"),
        n_classes=args.pop("n_classes"),
        input_dims=args.pop("input_dims"),
        noise_scale=args.pop("noise_scale"),
        n_samples=args.pop("n_samples"),
        seed=args.pop("seed"),
        output=args.pop("output"),
    )
