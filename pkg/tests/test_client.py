import numpy as np
import pytest

from fedblocks.client import ClientState, TrainingConfig, assemble_model, eligible_blocks, evaluate, local_train
from fedblocks.data import SynthTask, TaskKind, generate, train_val_split
from fedblocks.errors import ConfigError, DataError, EmptyShardError, ProtocolError
from fedblocks.model import BlockId, ModalityMask, ModelSpec, init_model, loss_and_grads

ONLY_0 = ModalityMask((True, False))
ONLY_1 = ModalityMask((False, True))
BOTH = ModalityMask((True, True))


def _received(model, state: ClientState, private=()):
    return {b: v for b, v in model.to_vectors().items() if b not in private and (not b.is_encoder or b.modality in state.mask)}


@pytest.mark.parametrize(
    "kwargs, field",
    [({"epochs": 0}, "federation.local_epochs"), ({"lr": -0.1}, "federation.lr"), ({"batch_size": 0}, "federation.batch_size")],
)
def test_training_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as excinfo:
        TrainingConfig(**kwargs)
    assert excinfo.value.field == field


def test_zero_lr_returns_received_blocks(small_dataset, small_spec, initial_model):
    state = ClientState(0, BOTH, np.arange(40), seed=1)
    received = _received(initial_model, state)
    update = local_train(state, received, small_dataset, small_spec, TrainingConfig(lr=0.0, batch_size=8))
    for block_id, vector in update.blocks.items():
        assert vector.tobytes() == received[block_id].tobytes()
    assert update.n_samples == 40


def test_update_holds_only_eligible_blocks(small_dataset, small_spec, initial_model):
    state = ClientState(0, ONLY_1, np.arange(30), seed=1)
    state.initialize_private(initial_model.to_vectors(), {BlockId.head()})
    received = _received(initial_model, state, private={BlockId.head()})
    update = local_train(state, received, small_dataset, small_spec, TrainingConfig())
    assert set(update.blocks) == {BlockId.encoder(1), BlockId.fusion()}
    assert eligible_blocks(state, small_spec) == [BlockId.encoder(1), BlockId.fusion()]


def test_single_step_matches_hand_stepped_sgd(small_dataset, small_spec, initial_model):
    shard = np.arange(12)
    state = ClientState(0, BOTH, shard, seed=4)
    lr = 0.3
    update = local_train(state, _received(initial_model, state), small_dataset, small_spec, TrainingConfig(lr=lr, batch_size=12))

    # A single full batch: the gradient does not depend on the shuffled order beyond summation order.
    _, grads = loss_and_grads(initial_model, small_dataset.inputs(BOTH, shard), small_dataset.labels[shard], BOTH)
    for block_id, vector in update.blocks.items():
        expected = initial_model.to_vectors()[block_id] - lr * grads[block_id]
        np.testing.assert_allclose(vector, expected, rtol=0, atol=1e-14)


def test_private_blocks_written_back(small_dataset, small_spec, initial_model):
    state = ClientState(2, BOTH, np.arange(50), seed=3)
    private = {BlockId.fusion(), BlockId.head()}
    state.initialize_private(initial_model.to_vectors(), private)
    before = {b: v.copy() for b, v in state.private_store.items()}
    update = local_train(state, _received(initial_model, state, private), small_dataset, small_spec, TrainingConfig(lr=0.1))
    assert set(update.blocks) == {BlockId.encoder(0), BlockId.encoder(1)}
    for block_id in private:
        assert not np.array_equal(state.private_store[block_id], before[block_id])


def test_local_train_is_deterministic(small_dataset, small_spec, initial_model):
    def run():
        state = ClientState(1, BOTH, np.arange(64), seed=9)
        return local_train(state, _received(initial_model, state), small_dataset, small_spec, TrainingConfig(batch_size=10), round_index=3)

    a, b = run(), run()
    for block_id in a.blocks:
        assert a.blocks[block_id].tobytes() == b.blocks[block_id].tobytes()
    assert a.train_loss == b.train_loss


def test_batch_order_depends_on_round(small_dataset, small_spec, initial_model):
    state = ClientState(1, BOTH, np.arange(64), seed=9)
    received = _received(initial_model, state)
    a = local_train(state, received, small_dataset, small_spec, TrainingConfig(batch_size=10), round_index=0)
    b = local_train(state, received, small_dataset, small_spec, TrainingConfig(batch_size=10), round_index=1)
    assert not np.array_equal(a.blocks[BlockId.head()], b.blocks[BlockId.head()])


def test_empty_shard(small_dataset, small_spec, initial_model):
    state = ClientState(0, BOTH, np.array([], dtype=int), seed=0)
    with pytest.raises(EmptyShardError):
        local_train(state, _received(initial_model, state), small_dataset, small_spec, TrainingConfig())


def test_received_private_block_is_a_protocol_error(small_spec, initial_model):
    state = ClientState(0, BOTH, np.arange(5), seed=0)
    state.initialize_private(initial_model.to_vectors(), {BlockId.head()})
    with pytest.raises(ProtocolError):
        assemble_model(state, initial_model.to_vectors(), small_spec)


def test_missing_block_is_a_protocol_error(small_spec, initial_model):
    state = ClientState(0, BOTH, np.arange(5), seed=0)
    received = initial_model.to_vectors()
    del received[BlockId.encoder(1)]
    with pytest.raises(ProtocolError):
        assemble_model(state, received, small_spec)


def test_absent_encoder_is_zero_placeholder(small_spec, initial_model):
    state = ClientState(0, ONLY_0, np.arange(5), seed=0)
    model = assemble_model(state, _received(initial_model, state), small_spec)
    np.testing.assert_array_equal(model.to_vectors()[BlockId.encoder(1)], 0.0)


def test_evaluate_uses_client_mask(small_dataset, small_spec, initial_model):
    state = ClientState(0, ONLY_0, np.arange(5), seed=0)
    scores = evaluate(state, initial_model.to_vectors(), small_spec, small_dataset)
    assert scores.n_samples == small_dataset.n_samples
    assert 0.0 <= scores.macro_f1 <= 1.0
    assert sum(scores.support) == small_dataset.n_samples


def test_evaluate_empty_set(small_dataset, small_spec, initial_model):
    state = ClientState(0, BOTH, np.arange(5), seed=0)
    with pytest.raises(DataError):
        evaluate(state, initial_model.to_vectors(), small_spec, small_dataset.subset(np.array([], dtype=int)))


def test_single_modality_stays_at_chance():
    task = SynthTask(TaskKind.COMPLEMENTARY, 4, (8, 8), noise_scale=0.2, n_samples=4000)
    data = generate(task, 21)
    train_idx, val_idx = train_val_split(data.labels, 0.5, seed=0)
    train, val = data.subset(train_idx), data.subset(val_idx)
    spec = ModelSpec((8, 8), 4)
    state = ClientState(0, ONLY_1, np.arange(train.n_samples), seed=2)
    received = _received(init_model(spec, 0), state)
    update = local_train(state, received, train, spec, TrainingConfig(epochs=10, lr=0.1, batch_size=64))
    scores = evaluate(state, update.blocks, spec, val)
    assert scores.accuracy <= 0.25 + 0.05
