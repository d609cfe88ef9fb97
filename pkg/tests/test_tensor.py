import numpy as np
import pytest

from fedblocks import tensor as T
from fedblocks.errors import DimensionError, LabelIndexError, TapeError
from fedblocks.testing import assert_gradients_close, central_difference, tensor_gradient


def test_tensor_is_read_only_float64():
    t = T.Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags.c_contiguous
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_tensor_copies_input():
    a = np.ones((2, 2))
    t = T.Tensor(a)
    a[0, 0] = 7.0
    assert t.data[0, 0] == 1.0


def test_flat_is_row_major():
    t = T.Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(t.flat(), [0, 1, 2, 3, 4, 5])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_row_times_column():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    expected = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, expected, rtol=1e-13, atol=1e-13)


def test_relu_clips_negatives():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_tanh_slope_at_zero_is_one():
    grad = tensor_gradient(lambda t: T.reduce_sum(T.tanh(t)), np.zeros(1))
    np.testing.assert_array_equal(grad, [1.0])


def test_elementwise_rejects_broadcast():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((1, 3))))


def test_add_bias_broadcasts_rows():
    out = T.add_bias(T.Tensor(np.zeros((2, 3))), T.Tensor([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])


def test_softmax_rows_sum_to_one_and_stable():
    out = T.softmax(T.Tensor([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0)
    np.testing.assert_allclose(out.data[0], [0.5, 0.5])
    np.testing.assert_allclose(out.data[1], [0.25, 0.75])


def test_softmax_rows_sum_to_one_over_wide_ranges():
    x = np.random.default_rng(4).uniform(-300.0, 300.0, size=(50, 7))
    sums = T.softmax(T.Tensor(x)).data.sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) <= 1e-12


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        T.softmax(T.Tensor(np.zeros((2, 0))))


def test_cross_entropy_value():
    logits = T.Tensor([[0.0, 0.0], [0.0, 0.0]])
    assert T.cross_entropy(logits, [0, 1]).item() == pytest.approx(np.log(2.0))


def test_cross_entropy_single_sample():
    logits = T.Tensor([2.0, 0.0, -1.0])
    expected = -np.log(np.exp(2.0) / np.exp([2.0, 0.0, -1.0]).sum())
    assert T.cross_entropy(logits, 0).item() == pytest.approx(expected)


def test_cross_entropy_vanishes_for_a_confident_correct_logit():
    loss = T.cross_entropy(T.Tensor([[50.0, 0.0, 0.0]]), [0]).item()
    assert 0.0 <= loss < 1e-20


@pytest.mark.parametrize("label", [-1, 3])
def test_cross_entropy_label_out_of_range(label):
    with pytest.raises(LabelIndexError):
        T.cross_entropy(T.Tensor([[0.0, 1.0, 2.0]]), [label])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[1.0, -0.5, 0.2], [0.3, 0.3, 2.0]])
    y = np.array([2, 0])
    grad = tensor_gradient(lambda t: T.cross_entropy(t, y), z)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(2), y] -= 1.0
    np.testing.assert_allclose(grad, p / 2)


@pytest.mark.parametrize(
    "f, shape",
    [
        (lambda t: T.reduce_sum(T.tanh(t)), (3, 4)),
        (lambda t: T.reduce_sum(T.relu(t)), (3, 4)),
        (lambda t: T.reduce_sum(T.mul(t, t)), (2, 5)),
        (lambda t: T.reduce_sum(T.softmax(t)), (3, 4)),
        (lambda t: T.reduce_sum(T.mul(T.softmax(t), T.Tensor(np.arange(12.0).reshape(3, 4)))), (3, 4)),
        (lambda t: T.reduce_sum(T.matmul(t, T.Tensor(np.ones((4, 2))))), (3, 4)),
        (lambda t: T.reduce_sum(T.tanh(T.concat([t, T.mul(t, t)]))), (3, 2)),
        (lambda t: T.reduce_sum(T.scale_rows(t, T.column(t, 1))), (3, 4)),
        (lambda t: T.cross_entropy(T.reshape(t, (4,)), 1), (2, 2)),
    ],
    ids=["tanh", "relu", "mul", "softmax", "weighted-softmax", "matmul", "concat", "scale_rows", "reshape-ce"],
)
def test_primitive_gradients_match_finite_differences(f, shape):
    rng = np.random.default_rng(0)
    # Keep relu inputs away from the kink.
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    def loss(v):
        return f(T.Tensor(v)).item()

    assert_gradients_close(tensor_gradient(f, x), central_difference(loss, x))


def test_shared_operand_gradients_accumulate():
    x = np.array([[1.0, 2.0]])
    grad = tensor_gradient(lambda t: T.reduce_sum(T.add(t, t)), x)
    np.testing.assert_array_equal(grad, [[2.0, 2.0]])


def test_unused_watched_tensor_has_zero_gradient():
    tape = T.GradTape()
    a = tape.watch(np.ones((2, 2)))
    b = tape.watch(np.ones(3))
    loss = T.reduce_sum(T.tanh(a))
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads[b], np.zeros(3))


def test_backward_rejects_foreign_loss():
    tape = T.GradTape()
    other = T.GradTape()
    tape.watch(np.ones(2))
    loss = T.reduce_sum(other.watch(np.ones(2)))
    with pytest.raises(TapeError):
        T.backward(tape, loss)


def test_backward_requires_scalar():
    tape = T.GradTape()
    a = tape.watch(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        T.backward(tape, T.tanh(a))


def test_mixed_tapes_raise():
    with pytest.raises(TapeError):
        T.add(T.GradTape().watch(np.ones(2)), T.GradTape().watch(np.ones(2)))


def test_constants_are_not_recorded():
    tape = T.GradTape()
    T.tanh(T.Tensor(np.ones(2)))
    assert len(tape) == 0


def test_forward_and_backward_are_bitwise_repeatable():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)

    def run():
        tape = T.GradTape()
        tw, tb = tape.watch(w), tape.watch(b)
        logits = T.add_bias(T.matmul(T.tanh(T.Tensor(x)), tw), tb)
        loss = T.cross_entropy(T.relu(logits), [0, 1, 2, 0, 1])
        grads = T.backward(tape, loss)
        return loss.data.tobytes(), grads[tw].tobytes(), grads[tb].tobytes()

    assert run() == run()
