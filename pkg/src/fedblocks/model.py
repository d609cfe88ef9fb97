# Late-fusion multimodal model split into aggregatable blocks

# Copyright (C) 2026   fedblocks developers

"""Blocked late-fusion network.

The model has one encoder per modality, a fusion block and a prediction head.
Each block owns a disjoint set of named parameters. Flattening a block
(:func:`extract_block`) concatenates its parameters in the canonical order

* encoder ``m``: ``w1`` (in_m x hidden), ``b1``, ``w2`` (hidden x embed), ``b2``
* concat fusion: ``w`` (M*embed x fusion), ``b``
* attention fusion: ``score_0`` ... ``score_{M-1}`` (embed x 1 each), ``w`` (embed x fusion), ``b``
* head: ``w`` (fusion x n_classes), ``b``

with each array laid out row-major. Blocks themselves are ordered encoders
(by modality), fusion, head.

Encoders use tanh layers, the fusion layer is a relu layer and the head is
linear. A modality that is absent under the :class:`ModalityMask` contributes an
all-zero embedding to fusion; its encoder is never evaluated.
"""

import json
import logging
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .errors import BlockError, DimensionError, MaskMismatchError, SpecError
from .utils import FORMAT_VERSION

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FEDBLKS\x01"


class BlockKind(str, Enum):
    ENCODER = "encoder"
    FUSION = "fusion"
    HEAD = "head"


class FusionVariant(str, Enum):
    CONCAT = "concat"
    ATTENTION = "attention"


@dataclass(frozen=True)
class BlockId:
    """Name of a block: ``Encoder(m)``, ``Fusion`` or ``Head``."""

    kind: BlockKind
    modality: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.kind is BlockKind.ENCODER:
            if not isinstance(self.modality, (int, np.integer)) or self.modality < 0:
                raise BlockError(f"Encoder block needs a non-negative modality index, got {self.modality!r}")
            object.__setattr__(self, "modality", int(self.modality))
        elif self.modality is not None:
            raise BlockError(f"{self.kind.value} block takes no modality index")

    @classmethod
    def encoder(cls, modality: int) -> "BlockId":
        return cls(BlockKind.ENCODER, modality)

    @classmethod
    def fusion(cls) -> "BlockId":
        return cls(BlockKind.FUSION)

    @classmethod
    def head(cls) -> "BlockId":
        return cls(BlockKind.HEAD)

    @classmethod
    def parse(cls, text: str) -> "BlockId":
        """Inverse of ``str(block_id)``: ``"encoder-1"``, ``"fusion"``, ``"head"``."""
        kind, _, index = text.partition("-")
        try:
            if kind == BlockKind.ENCODER.value:
                return cls.encoder(int(index))
            if not index:
                return cls(BlockKind(kind))
        except ValueError as e:
            raise BlockError(f"Invalid block id {text!r}") from e
        raise BlockError(f"Invalid block id {text!r}")

    @property
    def is_encoder(self) -> bool:
        return self.kind is BlockKind.ENCODER

    def sort_key(self) -> tuple[int, int]:
        rank = {BlockKind.ENCODER: 0, BlockKind.FUSION: 1, BlockKind.HEAD: 2}[self.kind]
        return rank, self.modality or 0

    def __str__(self) -> str:
        if self.kind is BlockKind.ENCODER:
            return f"encoder-{self.modality}"
        return self.kind.value


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and fusion variant of a :class:`BlockedModel`."""

    input_dims: tuple[int, ...]
    n_classes: int
    embed_dim: int = 16
    hidden_dim: int = 32
    fusion_dim: int = 32
    fusion: FusionVariant = FusionVariant.CONCAT

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        try:
            object.__setattr__(self, "fusion", FusionVariant(self.fusion))
        except ValueError as e:
            raise SpecError(f"Unknown fusion variant {self.fusion!r}") from e
        if not self.input_dims:
            raise SpecError("A model needs at least one modality")
        dims = {
            "input_dims": min(self.input_dims),
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "fusion_dim": self.fusion_dim,
        }
        for name, value in dims.items():
            if int(value) <= 0:
                raise SpecError(f"{name} must be positive, got {value}")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dims": list(self.input_dims),
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "fusion_dim": self.fusion_dim,
            "fusion": self.fusion.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        return cls(**dict(data))


@dataclass(frozen=True)
class ModalityMask:
    """Which modalities a client observes. At least one must be present."""

    present: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "present", tuple(bool(p) for p in self.present))
        if not any(self.present):
            raise MaskMismatchError("A modality mask needs at least one present modality")

    @classmethod
    def full(cls, n_modalities: int) -> "ModalityMask":
        return cls((True,) * n_modalities)

    @classmethod
    def of(cls, modalities: Sequence[int], n_modalities: int) -> "ModalityMask":
        return cls(tuple(m in modalities for m in range(n_modalities)))

    @property
    def n_modalities(self) -> int:
        return len(self.present)

    @property
    def modalities(self) -> tuple[int, ...]:
        return tuple(m for m, p in enumerate(self.present) if p)

    @property
    def label(self) -> str:
        """Group label, e.g. ``"m0"`` or ``"m0+m1"``."""
        return "+".join(f"m{m}" for m in self.modalities)

    def __contains__(self, modality: int) -> bool:
        return 0 <= modality < len(self.present) and self.present[modality]


def block_ids(spec: ModelSpec) -> tuple[BlockId, ...]:
    """All block ids of a model in canonical order."""
    return (*(BlockId.encoder(m) for m in range(spec.n_modalities)), BlockId.fusion(), BlockId.head())


def _check_block(spec: ModelSpec, block_id: BlockId) -> None:
    if block_id.is_encoder and block_id.modality >= spec.n_modalities:  # type: ignore[operator]
        raise BlockError(f"{block_id} is not a block of a {spec.n_modalities}-modality model")


def block_layout(spec: ModelSpec, block_id: BlockId) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes of one block in canonical order."""
    _check_block(spec, block_id)
    d = spec.embed_dim
    if block_id.kind is BlockKind.ENCODER:
        n_in = spec.input_dims[block_id.modality]  # type: ignore[index]
        return [("w1", (n_in, spec.hidden_dim)), ("b1", (spec.hidden_dim,)), ("w2", (spec.hidden_dim, d)), ("b2", (d,))]
    if block_id.kind is BlockKind.FUSION:
        if spec.fusion is FusionVariant.CONCAT:
            return [("w", (spec.n_modalities * d, spec.fusion_dim)), ("b", (spec.fusion_dim,))]
        scores = [(f"score_{m}", (d, 1)) for m in range(spec.n_modalities)]
        return [*scores, ("w", (d, spec.fusion_dim)), ("b", (spec.fusion_dim,))]
    return [("w", (spec.fusion_dim, spec.n_classes)), ("b", (spec.n_classes,))]


def _fan_in(layout: list[tuple[str, tuple[int, ...]]], name: str) -> int:
    # Biases share the fan-in of the weight of their layer.
    if name.startswith("b"):
        weight = "w" + name[1:]
        return dict(layout)[weight][0]
    return dict(layout)[name][0]


def block_size(spec: ModelSpec, block_id: BlockId) -> int:
    return sum(int(np.prod(shape)) for _, shape in block_layout(spec, block_id))


@dataclass(frozen=True, eq=False)
class BlockedModel:
    """A value-type multimodal model: a map from block id to named parameter arrays."""

    spec: ModelSpec
    blocks: Mapping[BlockId, Mapping[str, np.ndarray]]
    seed: int | None = None

    def __post_init__(self):
        expected = set(block_ids(self.spec))
        if set(self.blocks) != expected:
            missing = sorted(map(str, expected - set(self.blocks)))
            extra = sorted(map(str, set(self.blocks) - expected))
            raise BlockError(f"Model blocks do not match the spec (missing={missing}, unexpected={extra})")
        frozen: dict[BlockId, dict[str, np.ndarray]] = {}
        for block_id in block_ids(self.spec):
            params = self.blocks[block_id]
            layout = block_layout(self.spec, block_id)
            if {name for name, _ in layout} != set(params):
                raise BlockError(f"{block_id} has parameters {sorted(params)}, expected {[n for n, _ in layout]}")
            frozen[block_id] = {}
            for name, shape in layout:
                array = np.array(params[name], dtype=np.float64)
                if array.shape != shape:
                    raise BlockError(f"{block_id}.{name} has shape {array.shape}, expected {shape}")
                array.setflags(write=False)
                frozen[block_id][name] = array
        object.__setattr__(self, "blocks", frozen)

    @property
    def block_ids(self) -> tuple[BlockId, ...]:
        return block_ids(self.spec)

    def parameter_count(self, block_id: BlockId | None = None) -> int:
        if block_id is None:
            return sum(block_size(self.spec, b) for b in self.block_ids)
        return block_size(self.spec, block_id)

    def to_vectors(self) -> dict[BlockId, np.ndarray]:
        return {b: extract_block(self, b) for b in self.block_ids}

    @classmethod
    def from_vectors(cls, spec: ModelSpec, vectors: Mapping[BlockId, np.ndarray], seed: int | None = None) -> "BlockedModel":
        return cls(spec=spec, blocks={b: _unflatten(spec, b, vectors[b]) for b in block_ids(spec)}, seed=seed)

    def clone(self) -> "BlockedModel":
        return BlockedModel(self.spec, {b: {n: a.copy() for n, a in p.items()} for b, p in self.blocks.items()}, self.seed)


def init_model(spec: ModelSpec, seed: int) -> BlockedModel:
    """Deterministic initialization, uniform in ``±1/sqrt(fan_in)``.

    Args:
        spec: Model dimensions. Invalid dimensions raise :class:`SpecError` when the spec is built.
        seed: Seed for ``numpy.random.default_rng``.

    Returns:
        BlockedModel: The initialized model. The same seed gives a bit-identical model.
    """
    rng = np.random.default_rng(seed)
    blocks: dict[BlockId, dict[str, np.ndarray]] = {}
    for block_id in block_ids(spec):
        layout = block_layout(spec, block_id)
        blocks[block_id] = {}
        for name, shape in layout:
            bound = 1.0 / np.sqrt(_fan_in(layout, name))
            blocks[block_id][name] = rng.uniform(-bound, bound, size=shape)
    logger.debug(f"Initialized {spec.fusion.value} model with {spec.n_modalities} modalities from seed {seed}")
    return BlockedModel(spec=spec, blocks=blocks, seed=seed)


def zero_block(spec: ModelSpec, block_id: BlockId) -> np.ndarray:
    return np.zeros(block_size(spec, block_id))


def extract_block(model: BlockedModel, block_id: BlockId) -> np.ndarray:
    """Flatten one block into a vector in canonical parameter order.

    Raises:
        BlockError: If ``block_id`` is not a block of ``model``.
    """
    _check_block(model.spec, block_id)
    return np.concatenate([a.reshape(-1) for a in model.blocks[block_id].values()])


def _unflatten(spec: ModelSpec, block_id: BlockId, vector: np.ndarray) -> dict[str, np.ndarray]:
    layout = block_layout(spec, block_id)
    vector = np.asarray(vector, dtype=np.float64)
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if vector.ndim != 1 or vector.size != expected:
        raise BlockError(f"{block_id} needs a flat vector of {expected} parameters, got shape {vector.shape}")
    params = {}
    offset = 0
    for name, shape in layout:
        count = int(np.prod(shape))
        params[name] = vector[offset : offset + count].reshape(shape).copy()
        offset += count
    return params


def insert_block(model: BlockedModel, block_id: BlockId, params: np.ndarray) -> BlockedModel:
    """Return a copy of ``model`` with one block replaced; other blocks are shared unchanged.

    Raises:
        BlockError: On an invalid id or a vector of the wrong length.
    """
    _check_block(model.spec, block_id)
    blocks = dict(model.blocks)
    blocks[block_id] = _unflatten(model.spec, block_id, params)
    return BlockedModel(spec=model.spec, blocks=blocks, seed=model.seed)


Inputs = Sequence[np.ndarray | None] | Mapping[int, np.ndarray]


def _prepare_inputs(spec: ModelSpec, inputs: Inputs, mask: ModalityMask) -> tuple[list[np.ndarray | None], int, bool]:
    if mask.n_modalities != spec.n_modalities:
        raise MaskMismatchError(f"Mask covers {mask.n_modalities} modalities, model has {spec.n_modalities}")
    if isinstance(inputs, Mapping):
        unknown = [m for m in inputs if not 0 <= m < spec.n_modalities]
        if unknown:
            raise MaskMismatchError(f"Inputs for unknown modalities {unknown}")
        xs = [inputs.get(m) for m in range(spec.n_modalities)]
    else:
        xs = list(inputs)
        if len(xs) != spec.n_modalities:
            raise MaskMismatchError(f"Expected {spec.n_modalities} input slots, got {len(xs)}")

    for m, x in enumerate(xs):
        if m in mask and x is None:
            raise MaskMismatchError(f"Modality {m} is present in the mask but no input was given")
        if m not in mask and x is not None:
            raise MaskMismatchError(f"Modality {m} is absent in the mask but an input was given")

    arrays = [None if x is None else np.asarray(x, dtype=np.float64) for x in xs]
    ndims = {a.ndim for a in arrays if a is not None}
    if len(ndims) != 1 or not ndims <= {1, 2}:
        raise DimensionError(f"Inputs must all be 1-D samples or 2-D batches, got dimensions {sorted(ndims)}")
    single = ndims == {1}
    if single:
        arrays = [None if a is None else a[None, :] for a in arrays]
    batch = {a.shape[0] for a in arrays if a is not None}
    if len(batch) != 1:
        raise DimensionError(f"Inputs differ in batch size: {sorted(batch)}")
    for m, a in enumerate(arrays):
        if a is not None and a.shape[1] != spec.input_dims[m]:
            raise DimensionError(f"Modality {m} input has {a.shape[1]} features, encoder expects {spec.input_dims[m]}")
    return arrays, batch.pop(), single


def _bind(model: BlockedModel, tape: T.GradTape | None) -> dict[BlockId, dict[str, T.Tensor]]:
    if tape is None:
        return {b: {n: T.Tensor(a) for n, a in p.items()} for b, p in model.blocks.items()}
    return {b: {n: tape.watch(a) for n, a in p.items()} for b, p in model.blocks.items()}


def _dense(x: T.Tensor, w: T.Tensor, b: T.Tensor, activation=T.tanh) -> T.Tensor:
    return activation(T.add_bias(T.matmul(x, w), b))


def _forward_bound(
    spec: ModelSpec,
    params: dict[BlockId, dict[str, T.Tensor]],
    xs: list[np.ndarray | None],
    batch: int,
    trace: dict[str, np.ndarray] | None,
) -> T.Tensor:
    embeddings: list[T.Tensor] = []
    for m, x in enumerate(xs):
        if x is None:
            embeddings.append(T.Tensor(np.zeros((batch, spec.embed_dim))))
            continue
        p = params[BlockId.encoder(m)]
        hidden = _dense(T.Tensor(x), p["w1"], p["b1"])
        embeddings.append(_dense(hidden, p["w2"], p["b2"]))

    f = params[BlockId.fusion()]
    if spec.fusion is FusionVariant.CONCAT:
        fused = _dense(T.concat(embeddings), f["w"], f["b"], T.relu)
    else:
        # Zeroed slots stay in the softmax.
        scores = T.concat([T.matmul(e, f[f"score_{m}"]) for m, e in enumerate(embeddings)])
        alpha = T.softmax(scores)
        pooled = T.scale_rows(embeddings[0], T.column(alpha, 0))
        for m in range(1, len(embeddings)):
            pooled = T.add(pooled, T.scale_rows(embeddings[m], T.column(alpha, m)))
        fused = _dense(pooled, f["w"], f["b"], T.relu)
        if trace is not None:
            trace["attention"] = np.array(alpha.data)

    h = params[BlockId.head()]
    logits = T.add_bias(T.matmul(fused, h["w"]), h["b"])
    if trace is not None:
        trace["embeddings"] = np.stack([np.array(e.data) for e in embeddings], axis=1)
    return logits


def forward(
    model: BlockedModel,
    inputs: Inputs,
    mask: ModalityMask,
    tape: T.GradTape | None = None,
    trace: dict[str, np.ndarray] | None = None,
) -> T.Tensor:
    """Masked late-fusion forward pass.

    Args:
        model: The model to evaluate.
        inputs: One entry per modality, either a sequence with ``None`` for absent
            modalities or a mapping from modality index to input. Entries are a single
            sample (1-D) or a batch (2-D, samples in rows).
        mask: The observed modalities. Inputs must be given exactly for present ones.
        tape: When given, every model parameter is watched on it.
        trace: Optional dict that receives ``embeddings`` (B x M x d) and, for
            attention fusion, ``attention`` (B x M).

    Returns:
        Tensor: Logits, (n_classes,) for a single sample or (B, n_classes) for a batch.

    Raises:
        MaskMismatchError: If inputs and mask disagree.
        DimensionError: If input widths or batch sizes are inconsistent.
    """
    xs, batch, single = _prepare_inputs(model.spec, inputs, mask)
    params = _bind(model, tape)
    logits = _forward_bound(model.spec, params, xs, batch, trace)
    if single:
        logits = T.reshape(logits, (model.spec.n_classes,))
        if trace is not None:
            trace.update({k: v[0] for k, v in trace.items()})
    return logits


def fusion_weights(model: BlockedModel, inputs: Inputs, mask: ModalityMask) -> np.ndarray:
    """Attention weights over modalities, (M,) for a sample or (B, M) for a batch."""
    if model.spec.fusion is not FusionVariant.ATTENTION:
        raise SpecError("Fusion weights are only defined for attention fusion")
    trace: dict[str, np.ndarray] = {}
    forward(model, inputs, mask, trace=trace)
    return trace["attention"]


def predict(model: BlockedModel, inputs: Inputs, mask: ModalityMask) -> np.ndarray:
    """Predicted class per sample."""
    logits = forward(model, inputs, mask).data
    return np.argmax(logits, axis=-1)


def loss_and_grads(
    model: BlockedModel, inputs: Inputs, labels, mask: ModalityMask
) -> tuple[float, dict[BlockId, np.ndarray]]:
    """Mean cross-entropy loss and its gradient per block, flattened in canonical order."""
    tape = T.GradTape()
    xs, batch, single = _prepare_inputs(model.spec, inputs, mask)
    params = _bind(model, tape)
    logits = _forward_bound(model.spec, params, xs, batch, None)
    loss = T.cross_entropy(logits, labels)
    grads = T.backward(tape, loss)
    flat = {b: np.concatenate([grads[t].reshape(-1) for t in p.values()]) for b, p in params.items()}
    return loss.item(), flat


@dataclass
class BlockStore:
    """Contents of a checkpoint: any subset of a model's blocks plus metadata."""

    spec: ModelSpec
    blocks: dict[BlockId, np.ndarray]
    seed: int | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_model(self) -> BlockedModel:
        missing = [str(b) for b in block_ids(self.spec) if b not in self.blocks]
        if missing:
            raise BlockError(f"Checkpoint lacks blocks {missing}; it cannot be turned into a full model")
        return BlockedModel.from_vectors(self.spec, self.blocks, self.seed)


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_blocks(
    path: Path,
    spec: ModelSpec,
    blocks: Mapping[BlockId, np.ndarray],
    seed: int | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write blocks to a binary checkpoint and a JSON sidecar describing block boundaries.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
    then every block as little-endian float64 in canonical block order. Offsets in
    the header and sidecar count float64 elements from the start of the data section.
    """
    path = Path(path)
    entries = []
    offset = 0
    ordered = sorted(blocks, key=BlockId.sort_key)
    for block_id in ordered:
        _check_block(spec, block_id)
        count = block_size(spec, block_id)
        if np.asarray(blocks[block_id]).shape != (count,):
            raise BlockError(f"{block_id} needs {count} parameters, got shape {np.asarray(blocks[block_id]).shape}")
        entries.append(
            {
                "id": str(block_id),
                "offset": offset,
                "count": count,
                "params": [{"name": n, "shape": list(s)} for n, s in block_layout(spec, block_id)],
            }
        )
        offset += count

    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "seed": seed,
        "blocks": entries,
        "metadata": dict(metadata or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for block_id in ordered:
            f.write(np.asarray(blocks[block_id], dtype="<f8").tobytes())

    sidecar = {
        "format_version": FORMAT_VERSION,
        "checkpoint": path.name,
        "data_offset_bytes": len(CHECKPOINT_MAGIC) + 8 + len(header_bytes),
        "dtype": "<f8",
        "blocks": entries,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.debug(f"Wrote {len(entries)} blocks ({offset} parameters) to {path}")
    return path


def read_header(path: Path) -> tuple[dict[str, Any], int]:
    """Parse a checkpoint header. Returns the header and the byte offset of the data section."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise BlockError(f"{path} is not a fedblocks checkpoint")
        (length,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(length).decode("utf-8"))
    return header, len(CHECKPOINT_MAGIC) + 8 + length


def load_blocks(path: Path) -> BlockStore:
    path = Path(path)
    header, data_offset = read_header(path)
    spec = ModelSpec.from_dict(header["spec"])
    data = np.frombuffer(path.read_bytes()[data_offset:], dtype="<f8")
    blocks = {}
    for entry in header["blocks"]:
        block_id = BlockId.parse(entry["id"])
        chunk = data[entry["offset"] : entry["offset"] + entry["count"]]
        if chunk.size != entry["count"]:
            raise BlockError(f"{path} is truncated inside block {block_id}")
        blocks[block_id] = chunk.astype(np.float64)
    return BlockStore(spec=spec, blocks=blocks, seed=header.get("seed"), metadata=header.get("metadata", {}))


def save_checkpoint(model: BlockedModel, path: Path, metadata: Mapping[str, Any] | None = None) -> Path:
    return save_blocks(path, model.spec, model.to_vectors(), seed=model.seed, metadata=metadata)


def load_checkpoint(path: Path) -> BlockedModel:
    return load_blocks(path).to_model()
