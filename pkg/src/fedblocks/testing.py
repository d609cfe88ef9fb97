from collections.abc import Callable
from pathlib import Path

import numpy as np

from .model import BlockedModel, BlockId, Inputs, ModalityMask, extract_block, forward, insert_block, load_blocks
from .tensor import GradTape, Tensor, backward, cross_entropy


def compare_block_stores(path1: Path, path2: Path, data_tolerance: float = 0.0) -> bool:
    """
    Compares two checkpoints block by block.

    Args:
        path1 (Path): Path to the first checkpoint.
        path2 (Path): Path to the second checkpoint.
        data_tolerance (float, optional): Absolute tolerance for floating-point
            comparisons. Use 0.0 for bitwise equality. Defaults to 0.0.

    Returns:
        bool: True if both checkpoints hold the same blocks with matching values.

    Raises:
        FileNotFoundError: If either of the provided file paths does not exist.
    """
    for path in (path1, path2):
        if not Path(path).exists():
            raise FileNotFoundError(f"File not found: {path}")
    store1, store2 = load_blocks(path1), load_blocks(path2)
    if store1.spec != store2.spec or set(store1.blocks) != set(store2.blocks):
        return False
    return all(compare_vectors(store1.blocks[b], store2.blocks[b], data_tolerance) for b in store1.blocks)


def compare_vectors(arr1: np.ndarray, arr2: np.ndarray, data_tolerance: float = 0.0) -> bool:
    if arr1.shape != arr2.shape:
        return False
    if data_tolerance > 0:
        return bool(np.allclose(arr1, arr2, rtol=0.0, atol=data_tolerance))
    return arr1.tobytes() == arr2.tobytes()


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
    return grad


def model_loss(model: BlockedModel, inputs: Inputs, labels, mask: ModalityMask) -> float:
    return cross_entropy(forward(model, inputs, mask), labels).item()


def numerical_block_gradients(
    model: BlockedModel, inputs: Inputs, labels, mask: ModalityMask, h: float = 1e-5
) -> dict[BlockId, np.ndarray]:
    """Finite-difference gradient of the mean cross-entropy for every block."""
    grads = {}
    for block_id in model.block_ids:

        def f(vector: np.ndarray, block_id: BlockId = block_id) -> float:
            return model_loss(insert_block(model, block_id, vector), inputs, labels, mask)

        grads[block_id] = central_difference(f, extract_block(model, block_id), h)
    return grads


def tensor_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Tape gradient of ``f`` at ``x`` where ``f`` maps a tensor to a scalar tensor."""
    tape = GradTape()
    t = tape.watch(x)
    return backward(tape, f(t))[t]


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7):
    """Assert per-component agreement: ``|a - n| <= atol`` or ``|a - n| <= rtol * max(|a|, |n|)``.

    Raises:
        AssertionError: Listing the worst offending component.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise AssertionError(f"Gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (err > atol) & (err > rtol * scale)
    if np.any(bad):
        i = int(np.argmax(np.where(bad, err, -1.0)))
        raise AssertionError(
            f"{int(bad.sum())} gradient components disagree; worst at {i}: "
            f"analytic={analytic.reshape(-1)[i]!r}, numeric={numeric.reshape(-1)[i]!r}"
        )
