"""Unit tests for tensor.py: forward values, gradients and accumulation rules."""

import numpy as np
import pytest

from metapu import tensor as T
from metapu.errors import ShapeError
from metapu.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ============================================================================
# linear
# ============================================================================

def test_linear_identity_weight():
    out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_linear_with_bias_hand_evaluation():
    out = T.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_linear_weight_gradient_is_column_sum_of_input(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.reduce(T.linear(x, w)).backward()
    expected = np.repeat(x.data.sum(axis=0)[:, None], 4, axis=1)
    np.testing.assert_allclose(w.grad, expected, rtol=1e-12)


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))


def test_linear_gradients_match_finite_differences(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    b = Tensor(rng.normal(size=(2,)))
    err = T.check_gradients(lambda x, w, b: T.reduce(T.square(T.linear(x, w, b))), [x, w, b])
    assert err < 1e-4


# ============================================================================
# relu
# ============================================================================

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_all_negative_is_zero():
    assert not T.relu(Tensor([-3.0, -0.5, -1e-9])).data.any()


def test_relu_gradient_away_from_zero(rng):
    data = rng.normal(size=(6, 3))
    data[np.abs(data) < 0.1] = 0.5
    x = Tensor(data)
    err = T.check_gradients(lambda x: T.reduce(T.square(T.relu(x))), [x])
    assert err < 1e-4


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    T.reduce(T.relu(x)).backward()
    assert x.grad[0] == 0.0


# ============================================================================
# group_gather
# ============================================================================

def test_gather_self_index_copies_rows():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    idx = np.repeat(np.arange(3)[:, None], 4, axis=1)
    out = T.group_gather(x, idx)
    assert out.shape == (3, 4, 2)
    for i in range(3):
        np.testing.assert_array_equal(out.data[i], np.tile(x.data[i], (4, 1)))


def test_gather_swaps_rows():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.group_gather(x, [[1], [0]])
    np.testing.assert_array_equal(out.data[:, 0, :], [[3.0, 4.0], [1.0, 2.0]])


def test_gather_backward_counts_occurrences():
    x = Tensor(np.ones((4, 2)), requires_grad=True)
    idx = np.array([[0, 0], [1, 3], [0, 3]])
    T.reduce(T.group_gather(x, idx)).backward()
    np.testing.assert_array_equal(x.grad[:, 0], [3.0, 1.0, 0.0, 2.0])


def test_gather_out_of_range_raises():
    with pytest.raises(ShapeError, match="out of range"):
        T.group_gather(Tensor(np.zeros((2, 3))), [[2]])


def test_gather_gradient_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(5, 3)))
    idx = rng.integers(0, 5, size=(5, 2))
    err = T.check_gradients(lambda x: T.reduce(T.square(T.group_gather(x, idx))), [x])
    assert err < 1e-4


# ============================================================================
# reduce
# ============================================================================

def test_reduce_sum_along_axis():
    out = T.reduce(Tensor(np.ones((2, 3))), axis=1, mode="sum")
    np.testing.assert_array_equal(out.data, [3.0, 3.0])


def test_reduce_max_tie_goes_to_lowest_index():
    x = Tensor([1.0, 5.0, 5.0], requires_grad=True)
    out = T.reduce(x, axis=0, mode="max")
    assert out.item() == 5.0
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reduce_mean_equals_sum_over_length(rng):
    x = Tensor(rng.normal(size=(4, 7)))
    mean = T.reduce(x, axis=1, mode="mean").data
    total = T.reduce(x, axis=1, mode="sum").data
    np.testing.assert_allclose(mean, total / 7, rtol=1e-15)


def test_reduce_invalid_axis_raises():
    with pytest.raises(ShapeError, match="axis"):
        T.reduce(Tensor(np.zeros((2, 2))), axis=2)


def test_reduce_max_gradient_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(3, 4, 2)))
    err = T.check_gradients(lambda x: T.reduce(T.square(T.reduce(x, axis=1, mode="max"))), [x])
    assert err < 1e-4


# ============================================================================
# combine
# ============================================================================

def test_combine_add_broadcasts_point_over_copies(rng):
    children = Tensor(rng.normal(size=(5, 4, 3)))
    points = Tensor(rng.normal(size=(5, 1, 3)))
    out = T.combine(children, points, mode="add")
    for j in range(4):
        np.testing.assert_allclose(out.data[:, j, :] - children.data[:, j, :], points.data[:, 0, :])


def test_combine_concat_last_axis():
    out = T.combine(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0, 5.0]]), mode="concat_last_axis")
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0, 4.0, 5.0]])


def test_combine_add_zero_is_identity(rng):
    a = Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(T.combine(a, Tensor(np.zeros((3, 2)))).data, a.data)


def test_combine_nonconforming_shapes_raise():
    with pytest.raises(ShapeError):
        T.combine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
    with pytest.raises(ShapeError):
        T.combine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), mode="concat_last_axis")


def test_broadcast_add_gradient_sums_over_copies():
    points = Tensor(np.zeros((2, 1, 3)), requires_grad=True)
    T.reduce(T.combine(Tensor(np.ones((2, 4, 3))), points)).backward()
    np.testing.assert_array_equal(points.grad, np.full((2, 1, 3), 4.0))


def test_multiply_rejects_implicit_broadcast():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))


# ============================================================================
# backward
# ============================================================================

def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    T.reduce(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_composed_graph_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(4, 3)) + 0.05)
    w = Tensor(rng.normal(size=(3, 3)))
    err = T.check_gradients(lambda x, w: T.reduce(T.mul(T.linear(x, w), T.relu(x))), [x, w])
    assert err < 1e-4


def test_two_uses_of_input_add_gradients():
    x = Tensor([2.0, 3.0], requires_grad=True)
    T.reduce(T.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_twice_doubles_gradients(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = T.reduce(T.square(x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * first)


def test_backward_non_scalar_root_raises():
    with pytest.raises(ShapeError, match="scalar"):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 5))
    a = T.reduce(T.relu(T.linear(Tensor(x), Tensor(w))), axis=0, mode="max").data
    b = T.reduce(T.relu(T.linear(Tensor(x), Tensor(w))), axis=0, mode="max").data
    assert a.tobytes() == b.tobytes()


def test_topological_order_puts_inputs_first():
    x = Tensor([1.0], requires_grad=True)
    y = T.exp(x)
    z = T.add(y, x)
    order = T.topological_order(z)
    position = {id(t): i for i, t in enumerate(order)}
    assert position[id(x)] < position[id(y)] < position[id(z)]
    assert len(order) == 3


# ============================================================================
# elementwise helpers
# ============================================================================

def test_sqrt_has_zero_subgradient_at_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    T.reduce(T.sqrt(x)).backward()
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


@pytest.mark.parametrize("op", [T.exp, T.square, lambda x: T.sqrt(T.add(T.square(x), 1.0)),
                                lambda x: T.scale(x, -2.5), lambda x: x ** 3])
def test_elementwise_gradients(rng, op):
    x = Tensor(rng.normal(size=(3, 2)))
    assert T.check_gradients(lambda x: T.reduce(op(x)), [x]) < 1e-4


def test_reshape_roundtrip_gradient(rng):
    x = Tensor(rng.normal(size=(2, 6)))
    assert T.check_gradients(lambda x: T.reduce(T.square(T.reshape(x, (3, 4)))), [x]) < 1e-4
