# Server: block-wise aggregation and the round loop

# Copyright (C) 2026   fedblocks developers

"""Block-wise federated averaging.

Every block is aggregated independently over the clients eligible to contribute
to it: ``Encoder(m)`` over the participating clients that hold modality ``m``,
``Fusion`` and ``Head`` over all participants unless the aggregation mode keeps
them private.

================  ===========================  =====================
Mode              Aggregated                   Kept on the client
================  ===========================  =====================
``FM``            encoders, fusion, head       nothing
``PH``            encoders, fusion             head
``PHF``           encoders                     fusion, head
================  ===========================  =====================
"""

import logging
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
import tqdm

from .client import ClientState, LocalUpdate, TrainingConfig, evaluate, local_train
from .data import MultimodalDataset
from .errors import DataError, EmptyShardError, FedBlocksError, PlanError, ProtocolError
from .metrics.analysis import ClientRecord, RoundMetrics
from .model import BlockedModel, BlockId, ModelSpec, block_ids, block_size, save_blocks
from .utils import derive_seed, write_json

logger = logging.getLogger(__name__)

EvalScope = Literal["server", "client"]


class AggregationMode(str, Enum):
    FM = "FM"
    PH = "PH"
    PHF = "PHF"

    @classmethod
    def parse(cls, text: str) -> "AggregationMode":
        return cls(str(text).upper())

    @property
    def private_blocks(self) -> frozenset[BlockId]:
        if self is AggregationMode.FM:
            return frozenset()
        if self is AggregationMode.PH:
            return frozenset({BlockId.head()})
        return frozenset({BlockId.fusion(), BlockId.head()})

    def aggregates(self, block_id: BlockId) -> bool:
        return block_id not in self.private_blocks

    def shared_blocks(self, spec: ModelSpec) -> tuple[BlockId, ...]:
        return tuple(b for b in block_ids(spec) if self.aggregates(b))


@dataclass(frozen=True)
class AggregationPlan:
    """Per block, the contributing ``(client_id, n_samples)`` pairs in ascending client id.

    ``skipped`` lists encoders that had no eligible participant this round; they
    carry over unchanged.
    """

    entries: Mapping[BlockId, tuple[tuple[int, int], ...]]
    skipped: tuple[BlockId, ...] = ()

    @property
    def block_ids(self) -> tuple[BlockId, ...]:
        return tuple(sorted(self.entries, key=BlockId.sort_key))

    def clients(self, block_id: BlockId) -> tuple[int, ...]:
        return tuple(c for c, _ in self.entries.get(block_id, ()))

    def total(self, block_id: BlockId) -> int:
        return sum(n for _, n in self.entries[block_id])

    def weights(self, block_id: BlockId) -> np.ndarray:
        """Normalized weights ``n_c / sum(n_c)`` over the block's eligible clients.

        Raises:
            PlanError: If the sample counts sum to zero.
        """
        total = self.total(block_id)
        if total <= 0:
            raise PlanError(f"Weights of {block_id} sum to zero")
        return np.array([n / total for _, n in self.entries[block_id]], dtype=np.float64)

    def summary(self) -> dict:
        return {
            "blocks": {str(b): list(self.clients(b)) for b in self.block_ids},
            "skipped": [str(b) for b in self.skipped],
        }


def build_plan(mode: AggregationMode, participants: Sequence[ClientState], n_modalities: int) -> AggregationPlan:
    """Eligibility of every participant for every aggregated block.

    An encoder no participant holds is skipped (logged) and keeps its previous value.
    """
    ordered = sorted(participants, key=lambda c: c.client_id)
    entries: dict[BlockId, tuple[tuple[int, int], ...]] = {}
    skipped = []
    for m in range(n_modalities):
        contributors = tuple((c.client_id, c.n_samples) for c in ordered if m in c.mask)
        if contributors:
            entries[BlockId.encoder(m)] = contributors
        else:
            skipped.append(BlockId.encoder(m))
            logger.warning(f"No participant holds modality {m}; encoder-{m} carries over this round")
    for block_id in (BlockId.fusion(), BlockId.head()):
        if mode.aggregates(block_id) and ordered:
            entries[block_id] = tuple((c.client_id, c.n_samples) for c in ordered)
    logger.debug(f"{mode.value} plan: " + ", ".join(f"{b}={len(entries[b])}" for b in sorted(entries, key=BlockId.sort_key)))
    return AggregationPlan(entries=entries, skipped=tuple(skipped))


class AggregationStrategy(Protocol):
    """Combines client vectors of one block into the new global vector."""

    def __call__(self, previous: np.ndarray | None, vectors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray: ...


class FedAvg:
    """Weighted average accumulated in the given (ascending client id) order.

    The sum starts from ``w_0 * v_0``, so a single contributor with weight 1.0 is
    reproduced bit for bit.
    """

    def __call__(self, previous: np.ndarray | None, vectors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
        acc = weights[0] * vectors[0]
        for w, v in zip(weights[1:], vectors[1:]):
            acc = acc + w * v
        return acc

    def __repr__(self) -> str:
        return "FedAvg()"


def aggregate(
    plan: AggregationPlan,
    updates: Sequence[LocalUpdate],
    previous: Mapping[BlockId, np.ndarray],
    strategy: AggregationStrategy | None = None,
) -> dict[BlockId, np.ndarray]:
    """Apply ``plan`` to the client updates.

    Planned blocks are replaced by ``strategy`` (FedAvg by default) applied to the
    contributions in ascending client id; all other blocks of ``previous`` carry over.

    Raises:
        ProtocolError: If a planned client or block is missing from the updates, or an
            update contains a block the client is not planned for.
        PlanError: If a block's weights sum to zero.
    """
    strategy = strategy or FedAvg()
    by_client: dict[int, LocalUpdate] = {}
    for update in updates:
        if update.client_id in by_client:
            raise ProtocolError(f"Duplicate update from client {update.client_id}")
        by_client[update.client_id] = update

    for update in by_client.values():
        for block_id in update.blocks:
            if update.client_id not in plan.clients(block_id):
                raise ProtocolError(f"Client {update.client_id} sent {block_id}, which it is not eligible to contribute")

    new = {b: np.array(v, dtype=np.float64) for b, v in previous.items()}
    for block_id in plan.block_ids:
        vectors = []
        for client_id in plan.clients(block_id):
            update = by_client.get(client_id)
            if update is None:
                raise ProtocolError(f"Missing update from client {client_id}")
            if block_id not in update.blocks:
                raise ProtocolError(f"Client {client_id} did not send {block_id}")
            vectors.append(np.asarray(update.blocks[block_id], dtype=np.float64))
        weights = plan.weights(block_id)
        if not math.isclose(math.fsum(weights), 1.0, rel_tol=0.0, abs_tol=1e-15):
            raise PlanError(f"Weights of {block_id} sum to {math.fsum(weights)!r}")
        new[block_id] = strategy(previous.get(block_id), vectors, weights)
    return new


@dataclass
class GlobalState:
    """Server-held shared blocks. Private blocks never appear here."""

    blocks: dict[BlockId, np.ndarray]
    round_index: int = 0
    history: list[RoundMetrics] = field(default_factory=list)
    plans: list[AggregationPlan] = field(default_factory=list)
    comm_history: list[int] = field(default_factory=list)


@dataclass
class Federation:
    """Everything a run needs besides the evolving :class:`GlobalState`.

    ``client_validation`` maps client id to indices into ``validation`` and is used
    when ``eval_scope`` is ``"client"``.
    """

    spec: ModelSpec
    train: MultimodalDataset
    clients: list[ClientState]
    mode: AggregationMode
    hyper: TrainingConfig = field(default_factory=TrainingConfig)
    rounds: int = 60
    validation: MultimodalDataset | None = None
    eval_scope: EvalScope = "server"
    client_validation: Mapping[int, np.ndarray] | None = None
    eval_interval: int = 1
    participation: float = 1.0
    broadcast_all: bool = False
    max_workers: int = 1
    seed: int = 0
    strategy: AggregationStrategy = field(default_factory=FedAvg)

    def client(self, client_id: int) -> ClientState:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)


def start(federation: Federation, initial: BlockedModel) -> GlobalState:
    """Seed private stores from ``initial`` and return the round-0 server state."""
    vectors = initial.to_vectors()
    for client in federation.clients:
        client.initialize_private(vectors, federation.mode.private_blocks)
    shared = {b: vectors[b] for b in federation.mode.shared_blocks(federation.spec)}
    return GlobalState(blocks=shared)


def select_participants(federation: Federation, round_index: int) -> list[ClientState]:
    """Clients taking part in a round, in ascending id. Empty shards are skipped."""
    clients = sorted(federation.clients, key=lambda c: c.client_id)
    if federation.participation < 1.0:
        k = max(1, int(round(federation.participation * len(clients))))
        rng = np.random.default_rng(derive_seed(federation.seed, "participation", round_index))
        chosen = set(rng.choice(len(clients), size=k, replace=False).tolist())
        clients = [c for i, c in enumerate(clients) if i in chosen]
    selected = []
    for c in clients:
        if c.n_samples == 0:
            logger.warning(f"Client {c.client_id} has no training samples; skipped in round {round_index + 1}")
            continue
        selected.append(c)
    return selected


def dispatch_blocks(state: GlobalState, client: ClientState, federation: Federation) -> dict[BlockId, np.ndarray]:
    """Shared blocks sent to ``client``: its own encoders (all encoders with broadcast) plus non-private fusion/head."""
    payload = {}
    for block_id, vector in state.blocks.items():
        if block_id.is_encoder and not federation.broadcast_all and block_id.modality not in client.mask:
            continue
        payload[block_id] = vector
    return payload


def _train_one(client: ClientState, payload, federation: Federation, round_index: int) -> LocalUpdate | None:
    try:
        return local_train(client, payload, federation.train, federation.spec, federation.hyper, round_index)
    except EmptyShardError as e:
        logger.warning(f"Round {round_index + 1}: {e}; client skipped")
        return None
    except FedBlocksError as e:
        raise ProtocolError(f"Round {round_index + 1}, client {client.client_id}: {e}") from e


def evaluate_round(state: GlobalState, federation: Federation, round_index: int, comm_params: int, loss: float) -> RoundMetrics:
    if federation.validation is None:
        raise DataError("Federation has no validation set")
    records = []
    for client in sorted(federation.clients, key=lambda c: c.client_id):
        eval_set = federation.validation
        if federation.eval_scope == "client":
            if federation.client_validation is None:
                raise DataError("Client-local evaluation needs per-client validation indices")
            indices = federation.client_validation[client.client_id]
            if len(indices) == 0:
                logger.debug(f"Client {client.client_id} has no local validation samples; not scored")
                continue
            eval_set = federation.validation.subset(indices)
        scores = evaluate(client, state.blocks, federation.spec, eval_set)
        records.append(ClientRecord(client.client_id, client.group, client.n_samples, scores))
    return RoundMetrics(round_index + 1, federation.mode.value, tuple(records), comm_params, loss)


def run_round(state: GlobalState, federation: Federation) -> tuple[GlobalState, RoundMetrics | None]:
    """One communication round: dispatch, local training, block-wise aggregation, evaluation.

    Returns:
        tuple: The new state and the round's metrics (``None`` if the round is not evaluated).

    Raises:
        ProtocolError: If the round is past ``federation.rounds`` or a client or the
            aggregation violates the protocol. Messages carry the round and client.
    """
    t = state.round_index
    if t >= federation.rounds:
        raise ProtocolError(f"Round {t + 1} exceeds the configured {federation.rounds} rounds")

    participants = select_participants(federation, t)
    payloads = {c.client_id: dispatch_blocks(state, c, federation) for c in participants}

    if federation.max_workers > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=federation.max_workers) as executor:
            futures = {c.client_id: executor.submit(_train_one, c, payloads[c.client_id], federation, t) for c in participants}
            results = {cid: f.result() for cid, f in sorted(futures.items())}
    else:
        results = {c.client_id: _train_one(c, payloads[c.client_id], federation, t) for c in participants}

    updates = [u for _, u in sorted(results.items()) if u is not None]
    trained = [c for c in participants if results[c.client_id] is not None]
    plan = build_plan(federation.mode, trained, federation.spec.n_modalities)
    try:
        blocks = aggregate(plan, updates, state.blocks, federation.strategy)
    except FedBlocksError as e:
        raise type(e)(f"Round {t + 1}: {e}") from e

    leaked = set(blocks) & federation.mode.private_blocks
    if leaked:
        raise ProtocolError(f"Round {t + 1}: server state holds private blocks {sorted(map(str, leaked))}")

    comm_params = sum(v.size for c in trained for v in payloads[c.client_id].values())
    comm_params += sum(v.size for u in updates for v in u.blocks.values())
    loss = float(np.mean([u.train_loss for u in updates])) if updates else float("nan")

    new_state = GlobalState(
        blocks=blocks,
        round_index=t + 1,
        history=list(state.history),
        plans=[*state.plans, plan],
        comm_history=[*state.comm_history, comm_params],
    )
    metrics = None
    if federation.validation is not None and ((t + 1) % federation.eval_interval == 0 or t + 1 == federation.rounds):
        metrics = evaluate_round(new_state, federation, t, comm_params, loss)
        new_state.history.append(metrics)
        logger.debug(f"{federation.mode.value} round {t + 1}: global macro-F1 {metrics.global_score:.4f}")
    return new_state, metrics


def save_round_checkpoint(directory: Path, state: GlobalState, federation: Federation) -> Path:
    """Write the global blocks and a JSON round manifest for the state's last round."""
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"round-{state.round_index:03d}"
    metadata = {"round": state.round_index, "mode": federation.mode.value}
    path = save_blocks(directory / f"{stem}.ckpt", federation.spec, state.blocks, seed=federation.seed, metadata=metadata)
    last = state.history[-1] if state.history and state.history[-1].round_index == state.round_index else None
    manifest = {
        **metadata,
        "checkpoint": path.name,
        "plan": state.plans[-1].summary() if state.plans else None,
        "group_scores": last.group_scores if last else None,
        "global_score": last.global_score if last else None,
    }
    write_json(directory / f"{stem}.json", manifest)
    return path


def run_federation(
    federation: Federation,
    initial: BlockedModel,
    checkpoint_dir: Path | None = None,
    checkpoint_interval: int = 0,
    progress: bool = True,
) -> GlobalState:
    """Run all rounds from ``initial`` and return the final server state."""
    state = start(federation, initial)
    logger.info(
        f"Starting {federation.mode.value} federation: {len(federation.clients)} clients, {federation.rounds} rounds, "
        f"blocks shared: {', '.join(str(b) for b in federation.mode.shared_blocks(federation.spec))}"
    )
    for _ in tqdm.trange(federation.rounds, desc=f"{federation.mode.value}", disable=not progress, leave=False):
        state, _metrics = run_round(state, federation)
        if checkpoint_dir is not None and checkpoint_interval > 0 and state.round_index % checkpoint_interval == 0:
            save_round_checkpoint(checkpoint_dir, state, federation)
    return state


def block_sizes(spec: ModelSpec) -> dict[BlockId, int]:
    return {b: block_size(spec, b) for b in block_ids(spec)}
