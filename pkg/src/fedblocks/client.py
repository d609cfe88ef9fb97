# Client runtime: local training and evaluation

# Copyright (C) 2026   fedblocks developers

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .data import MultimodalDataset
from .errors import ConfigError, DataError, EmptyShardError, ProtocolError
from .metrics.scores import Scores, score_predictions
from .model import BlockedModel, BlockId, ModalityMask, ModelSpec, block_ids, loss_and_grads, predict, zero_block

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    """Local optimization settings: plain minibatch SGD without momentum."""

    epochs: int = 1
    lr: float = 0.2
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("federation.local_epochs", f"must be at least 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError("federation.lr", f"must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("federation.batch_size", f"must be at least 1, got {self.batch_size}")


@dataclass
class ClientState:
    """A client's modality subset, training shard and private block store.

    ``private_store`` holds exactly the blocks that the active aggregation mode keeps
    on the client. The server never reads or writes it.
    """

    client_id: int
    mask: ModalityMask
    shard: np.ndarray
    seed: int
    private_store: dict[BlockId, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.shard = np.asarray(self.shard, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return int(self.shard.size)

    @property
    def group(self) -> str:
        return self.mask.label

    def initialize_private(self, initial: Mapping[BlockId, np.ndarray], private_ids) -> None:
        """Seed the private store from the global initialization."""
        self.private_store = {b: np.array(initial[b], dtype=np.float64) for b in sorted(private_ids, key=BlockId.sort_key)}


@dataclass(frozen=True)
class LocalUpdate:
    client_id: int
    blocks: Mapping[BlockId, np.ndarray]
    n_samples: int
    train_loss: float = float("nan")


def assemble_model(state: ClientState, received: Mapping[BlockId, np.ndarray], spec: ModelSpec) -> BlockedModel:
    """Build the client's working model from received shared blocks and its private blocks.

    Encoders of absent modalities that were not received are zero placeholders; the
    masked forward pass never evaluates them.

    Raises:
        ProtocolError: If the server sent a private block, or a needed block is missing.
        BlockError: If a block has the wrong length.
    """
    overlap = set(received) & set(state.private_store)
    if overlap:
        raise ProtocolError(f"Client {state.client_id} received private blocks {sorted(map(str, overlap))}")
    vectors: dict[BlockId, np.ndarray] = {}
    for block_id in block_ids(spec):
        if block_id in state.private_store:
            vectors[block_id] = state.private_store[block_id]
        elif block_id in received:
            vectors[block_id] = received[block_id]
        elif block_id.is_encoder and block_id.modality not in state.mask:
            vectors[block_id] = zero_block(spec, block_id)
        else:
            raise ProtocolError(f"Client {state.client_id} is missing block {block_id}")
    return BlockedModel.from_vectors(spec, vectors)


def eligible_blocks(state: ClientState, spec: ModelSpec) -> list[BlockId]:
    """Shared blocks this client may contribute: its own encoders plus non-private fusion/head."""
    return [
        b
        for b in block_ids(spec)
        if b not in state.private_store and (not b.is_encoder or b.modality in state.mask)
    ]


def local_train(
    state: ClientState,
    received: Mapping[BlockId, np.ndarray],
    dataset: MultimodalDataset,
    spec: ModelSpec,
    hyper: TrainingConfig,
    round_index: int = 0,
) -> LocalUpdate:
    """Train the client model for ``hyper.epochs`` epochs of minibatch SGD on its shard.

    Batches are shuffled with ``default_rng([state.seed, round_index])``. Private blocks
    are written back to ``state.private_store``.

    Args:
        state: The client. Its private store is updated in place.
        received: Shared blocks sent by the server.
        dataset: The training set the shard indexes into.
        spec: Model dimensions.
        hyper: Local optimization settings.
        round_index: Zero-based communication round.

    Returns:
        LocalUpdate: Updated vectors of the eligible shared blocks.

    Raises:
        EmptyShardError: If the client has no samples.
        ProtocolError: If an absent modality's encoder receives a nonzero gradient.
    """
    if state.n_samples == 0:
        raise EmptyShardError(f"Client {state.client_id} has an empty shard")

    model = assemble_model(state, received, spec)
    vectors = {b: np.array(v, dtype=np.float64) for b, v in model.to_vectors().items()}
    absent = [BlockId.encoder(m) for m in range(spec.n_modalities) if m not in state.mask]
    rng = np.random.default_rng([state.seed, round_index])

    losses = []
    n_batches = 0
    for _ in range(hyper.epochs):
        order = state.shard[rng.permutation(state.n_samples)]
        for start in range(0, order.size, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            loss, grads = loss_and_grads(model, dataset.inputs(state.mask, batch), dataset.labels[batch], state.mask)
            for block_id in absent:
                if np.any(grads[block_id] != 0.0):
                    raise ProtocolError(f"Client {state.client_id}: gradient leaked into {block_id}")
            for block_id, grad in grads.items():
                vectors[block_id] = vectors[block_id] - hyper.lr * grad
            model = BlockedModel.from_vectors(spec, vectors)
            losses.append(loss)
            n_batches += 1

    for block_id in state.private_store:
        state.private_store[block_id] = vectors[block_id]

    mean_loss = float(np.mean(losses))
    logger.debug(f"Client {state.client_id} ({state.group}) round {round_index}: {n_batches} batches, loss {mean_loss:.4f}")
    return LocalUpdate(
        client_id=state.client_id,
        blocks={b: vectors[b] for b in eligible_blocks(state, spec)},
        n_samples=state.n_samples,
        train_loss=mean_loss,
    )


def evaluate(
    state: ClientState,
    blocks: Mapping[BlockId, np.ndarray],
    spec: ModelSpec,
    eval_set: MultimodalDataset,
) -> Scores:
    """Score the client's model (shared blocks + its private blocks) with its own mask.

    Raises:
        DataError: If ``eval_set`` is empty.
    """
    if eval_set.n_samples == 0:
        raise DataError(f"Client {state.client_id}: empty evaluation set")
    shared = {b: v for b, v in blocks.items() if b not in state.private_store}
    model = assemble_model(state, shared, spec)
    predictions = predict(model, eval_set.inputs(state.mask), state.mask)
    return score_predictions(predictions, eval_set.labels, spec.n_classes)
