import copy
import logging
import math

import numpy as np
import pytest

from fedblocks.client import ClientState, LocalUpdate, TrainingConfig, local_train
from fedblocks.data import ModalityConfig, assign_modalities, iid_partition
from fedblocks.errors import PlanError, ProtocolError
from fedblocks.model import BlockId, ModalityMask, block_ids, init_model
from fedblocks.server import (
    AggregationMode,
    AggregationPlan,
    Federation,
    aggregate,
    build_plan,
    dispatch_blocks,
    run_federation,
    run_round,
    save_round_checkpoint,
    select_participants,
    start,
)

BOTH = ModalityMask((True, True))
ENC0, ENC1, FUSION, HEAD = BlockId.encoder(0), BlockId.encoder(1), BlockId.fusion(), BlockId.head()


def _client(cid, mask, n):
    return ClientState(cid, mask, np.arange(n), seed=cid)


def test_mode_private_blocks():
    assert AggregationMode.FM.private_blocks == frozenset()
    assert AggregationMode.PH.private_blocks == {HEAD}
    assert AggregationMode.PHF.private_blocks == {FUSION, HEAD}
    assert AggregationMode.parse("phf") is AggregationMode.PHF


def test_shared_surface_is_monotone(small_spec):
    fm, ph, phf = (set(m.shared_blocks(small_spec)) for m in AggregationMode)
    assert phf < ph < fm


def test_plan_encoders_only_over_holders():
    clients = [_client(2, BOTH, 5), _client(0, ModalityMask((True, False)), 3), _client(1, ModalityMask((False, True)), 4)]
    plan = build_plan(AggregationMode.FM, clients, 2)
    assert plan.clients(ENC0) == (0, 2)
    assert plan.clients(ENC1) == (1, 2)
    assert plan.clients(FUSION) == (0, 1, 2)
    np.testing.assert_allclose(plan.weights(ENC0), [3 / 8, 5 / 8])


def test_plan_respects_private_blocks():
    plan = build_plan(AggregationMode.PHF, [_client(0, BOTH, 3)], 2)
    assert set(plan.block_ids) == {ENC0, ENC1}


def test_plan_skips_unheld_encoder(caplog):
    with caplog.at_level(logging.WARNING):
        plan = build_plan(AggregationMode.PH, [_client(0, ModalityMask((True, False)), 3)], 2)
    assert plan.skipped == (ENC1,)
    assert ENC1 not in plan.entries
    assert "encoder-1" in caplog.text


def test_two_client_mean():
    plan = AggregationPlan({ENC0: ((0, 5), (1, 5))})
    updates = [LocalUpdate(0, {ENC0: np.array([2.0, 4.0])}, 5), LocalUpdate(1, {ENC0: np.array([4.0, 8.0])}, 5)]
    new = aggregate(plan, updates, {ENC0: np.zeros(2)})
    np.testing.assert_array_equal(new[ENC0], [3.0, 6.0])


def test_singleton_is_bit_identical():
    v = np.random.default_rng(0).standard_normal(17)
    plan = AggregationPlan({ENC0: ((4, 13),)})
    new = aggregate(plan, [LocalUpdate(4, {ENC0: v}, 13)], {ENC0: np.zeros(17)})
    assert new[ENC0].tobytes() == v.tobytes()


def test_unplanned_blocks_carry_over():
    previous = {ENC0: np.ones(3), HEAD: np.full(2, 7.0)}
    plan = AggregationPlan({ENC0: ((0, 1),)})
    new = aggregate(plan, [LocalUpdate(0, {ENC0: np.zeros(3)}, 1)], previous)
    np.testing.assert_array_equal(new[HEAD], [7.0, 7.0])


def test_aggregation_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2024)
    blocks = [ENC0, ENC1, FUSION]
    for _ in range(1000):
        n_clients = int(rng.integers(1, 11))
        sizes = rng.integers(1, 200, size=n_clients)
        dim = int(rng.integers(1, 6))
        vectors = {c: {b: rng.standard_normal(dim) * 10 for b in blocks} for c in range(n_clients)}
        entries = {}
        for b in blocks:
            eligible = [c for c in range(n_clients) if rng.random() < 0.6]
            if eligible:
                entries[b] = tuple((c, int(sizes[c])) for c in eligible)
        plan = AggregationPlan(entries)
        updates = [
            LocalUpdate(c, {b: vectors[c][b] for b in plan.block_ids if c in plan.clients(b)}, int(sizes[c]))
            for c in range(n_clients)
        ]
        rng.shuffle(updates)
        previous = {b: np.zeros(dim) for b in blocks}
        new = aggregate(plan, updates, previous)
        for b in blocks:
            if b not in entries:
                np.testing.assert_array_equal(new[b], previous[b])
                continue
            total = sum(n for _, n in entries[b])
            for i in range(dim):
                expected = 0.0
                for c, n in entries[b]:
                    expected += n / total * vectors[c][b][i]
                assert abs(new[b][i] - expected) <= 1e-12
            assert abs(math.fsum(plan.weights(b)) - 1.0) <= 1e-15


def test_arrival_order_does_not_change_result():
    rng = np.random.default_rng(5)
    vs = [rng.standard_normal(8) for _ in range(6)]
    plan = AggregationPlan({ENC0: tuple((c, c + 1) for c in range(6))})
    updates = [LocalUpdate(c, {ENC0: vs[c]}, c + 1) for c in range(6)]
    a = aggregate(plan, updates, {})
    b = aggregate(plan, updates[::-1], {})
    assert a[ENC0].tobytes() == b[ENC0].tobytes()


def test_missing_update_is_protocol_error():
    plan = AggregationPlan({ENC0: ((0, 1), (1, 1))})
    with pytest.raises(ProtocolError):
        aggregate(plan, [LocalUpdate(0, {ENC0: np.zeros(2)}, 1)], {})


def test_ineligible_block_is_protocol_error():
    plan = AggregationPlan({ENC0: ((0, 1),)})
    with pytest.raises(ProtocolError):
        aggregate(plan, [LocalUpdate(0, {ENC0: np.zeros(2), ENC1: np.zeros(2)}, 1)], {})


def test_duplicate_update_is_protocol_error():
    plan = AggregationPlan({ENC0: ((0, 1),)})
    update = LocalUpdate(0, {ENC0: np.zeros(2)}, 1)
    with pytest.raises(ProtocolError):
        aggregate(plan, [update, update], {})


def test_zero_weights_are_a_plan_error():
    plan = AggregationPlan({ENC0: ((0, 0), (1, 0))})
    updates = [LocalUpdate(0, {ENC0: np.zeros(2)}, 0), LocalUpdate(1, {ENC0: np.zeros(2)}, 0)]
    with pytest.raises(PlanError):
        aggregate(plan, updates, {})


def test_dispatch_sends_own_encoders(small_federation, initial_model):
    federation = small_federation(AggregationMode.PH)
    state = start(federation, initial_model)
    payload = dispatch_blocks(state, federation.client(1), federation)
    assert set(payload) == {ENC1, FUSION}
    federation.broadcast_all = True
    assert set(dispatch_blocks(state, federation.client(1), federation)) == {ENC0, ENC1, FUSION}


@pytest.mark.parametrize("mode", list(AggregationMode))
def test_zero_lr_round_is_a_no_op(small_federation, initial_model, mode):
    federation = small_federation(mode, rounds=1, hyper=TrainingConfig(lr=0.0))
    state = start(federation, initial_model)
    new, metrics = run_round(state, federation)
    for block_id, vector in state.blocks.items():
        np.testing.assert_allclose(new.blocks[block_id], vector, rtol=0, atol=1e-15)
    assert metrics is not None and metrics.round_index == 1


def test_round_past_limit(small_federation, initial_model):
    federation = small_federation(rounds=1)
    state, _ = run_round(start(federation, initial_model), federation)
    with pytest.raises(ProtocolError, match="Round 2"):
        run_round(state, federation)


@pytest.mark.parametrize("mode", [AggregationMode.PH, AggregationMode.PHF])
def test_server_never_holds_private_blocks(small_federation, initial_model, mode):
    federation = small_federation(mode, rounds=3)
    state = start(federation, initial_model)
    for _ in range(3):
        state, _ = run_round(state, federation)
        assert not set(state.blocks) & mode.private_blocks
        for plan in state.plans:
            assert not set(plan.entries) & mode.private_blocks


@pytest.mark.parametrize("mode", [AggregationMode.PH, AggregationMode.PHF])
def test_private_blocks_follow_purely_local_training(small_federation, initial_model, mode):
    federation = small_federation(mode, rounds=3)
    shadows = {c.client_id: copy.deepcopy(c) for c in federation.clients}
    state = start(federation, initial_model)
    for shadow in shadows.values():
        shadow.initialize_private(initial_model.to_vectors(), mode.private_blocks)
    for t in range(3):
        payloads = {c.client_id: dispatch_blocks(state, c, federation) for c in federation.clients}
        state, _ = run_round(state, federation)
        for cid, shadow in shadows.items():
            local_train(shadow, payloads[cid], federation.train, federation.spec, federation.hyper, round_index=t)
            for block_id in mode.private_blocks:
                assert shadow.private_store[block_id].tobytes() == federation.client(cid).private_store[block_id].tobytes()


def test_private_head_independent_of_other_clients_data(small_federation, initial_model):
    a = small_federation(AggregationMode.PH, rounds=1)
    b = small_federation(AggregationMode.PH, rounds=1)
    b.client(3).shard = b.client(3).shard[: b.client(3).n_samples // 2]
    for federation in (a, b):
        state = start(federation, initial_model)
        run_round(state, federation)
    assert a.client(0).private_store[HEAD].tobytes() == b.client(0).private_store[HEAD].tobytes()
    assert a.client(3).private_store[HEAD].tobytes() != b.client(3).private_store[HEAD].tobytes()


def _full_modality_shards(n_samples: int, config: str) -> tuple[list[ModalityMask], list[np.ndarray]]:
    if config == "uneven-4":
        return [BOTH] * 4, np.array_split(np.arange(n_samples), [40, 110, 180])
    modality_config = ModalityConfig.parse(config)
    masks = assign_modalities(modality_config, modality_config.n_clients, seed=0)
    return masks, list(iid_partition(np.zeros(n_samples, dtype=int), modality_config.n_clients, seed=1).indices)


@pytest.mark.parametrize("config", ["uneven-4", "0-0-10"])
def test_fm_full_modality_equals_monolithic_fedavg(small_dataset, small_spec, initial_model, config):
    rounds = 10
    masks, shards = _full_modality_shards(small_dataset.n_samples, config)
    assert all(mask == BOTH for mask in masks)
    hyper = TrainingConfig(epochs=1, lr=0.1, batch_size=16)

    def clients():
        return [ClientState(c, masks[c], shards[c], seed=50 + c) for c in range(len(masks))]

    federation = Federation(small_spec, small_dataset, clients(), AggregationMode.FM, hyper, rounds=rounds)
    final = run_federation(federation, initial_model, progress=False)

    # Whole-model averaging of flattened parameter vectors in ascending client order.
    order = block_ids(small_spec)
    sizes = [initial_model.parameter_count(b) for b in order]
    flat = np.concatenate([initial_model.to_vectors()[b] for b in order])
    reference = clients()
    for t in range(rounds):
        received = dict(zip(order, np.split(flat, np.cumsum(sizes)[:-1])))
        updates = [local_train(c, received, small_dataset, small_spec, hyper, round_index=t) for c in reference]
        trained = [np.concatenate([u.blocks[b] for b in order]) for u in updates]
        total = sum(c.n_samples for c in reference)
        weights = [c.n_samples / total for c in reference]
        acc = weights[0] * trained[0]
        for w, v in zip(weights[1:], trained[1:]):
            acc = acc + w * v
        flat = acc

    monolithic = dict(zip(order, np.split(flat, np.cumsum(sizes)[:-1])))
    for block_id in order:
        assert final.blocks[block_id].tobytes() == monolithic[block_id].tobytes()


def test_gradient_isolation_across_a_run(small_federation, initial_model):
    # local_train raises ProtocolError if an absent encoder ever receives a gradient.
    federation = small_federation(AggregationMode.FM, rounds=4)
    state = run_federation(federation, initial_model, progress=False)
    assert state.round_index == 4
    # Client 1 never holds modality 0: encoder-0 is averaged without it.
    assert all(1 not in plan.clients(ENC0) for plan in state.plans)


def test_parallel_training_matches_serial(small_federation, initial_model):
    serial = run_federation(small_federation(AggregationMode.PH, rounds=2), initial_model, progress=False)
    parallel = run_federation(small_federation(AggregationMode.PH, rounds=2, max_workers=4), initial_model, progress=False)
    for block_id in serial.blocks:
        assert serial.blocks[block_id].tobytes() == parallel.blocks[block_id].tobytes()
    assert serial.history[-1].global_score == parallel.history[-1].global_score


def test_partial_participation_is_seeded(small_federation):
    federation = small_federation(participation=0.5, seed=3)
    a = [c.client_id for c in select_participants(federation, 2)]
    b = [c.client_id for c in select_participants(federation, 2)]
    assert a == b and len(a) == 2


def test_empty_client_is_skipped(small_federation, initial_model, caplog):
    federation = small_federation(AggregationMode.FM, rounds=1)
    federation.client(2).shard = np.array([], dtype=np.int64)
    with caplog.at_level(logging.WARNING):
        state, _ = run_round(start(federation, initial_model), federation)
    assert all(2 not in plan.clients(FUSION) for plan in state.plans)
    assert "Client 2" in caplog.text


def test_comm_history_counts_both_directions(small_federation, initial_model):
    federation = small_federation(AggregationMode.PHF, rounds=1)
    state, metrics = run_round(start(federation, initial_model), federation)
    sizes = {b: initial_model.parameter_count(b) for b in block_ids(federation.spec)}
    expected = sum(2 * sizes[BlockId.encoder(m)] for c in federation.clients for m in c.mask.modalities)
    assert state.comm_history == [expected]
    assert metrics.comm_params == expected


def test_round_checkpoint(tmp_path, small_federation, initial_model):
    federation = small_federation(AggregationMode.PH, rounds=2)
    state = run_federation(federation, initial_model, tmp_path / "ckpt", checkpoint_interval=1, progress=False)
    assert (tmp_path / "ckpt" / "round-001.ckpt").exists()
    assert (tmp_path / "ckpt" / "round-002.json").exists()
    path = save_round_checkpoint(tmp_path / "again", state, federation)
    assert path.name == "round-002.ckpt"


def test_history_groups(small_federation, initial_model):
    state = run_federation(small_federation(AggregationMode.FM, rounds=2), initial_model, progress=False)
    assert [m.round_index for m in state.history] == [1, 2]
    assert set(state.history[-1].group_scores) == {"m0", "m1", "m0+m1"}
