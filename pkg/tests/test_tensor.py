import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distembed import tensor as T
from distembed.errors import ContractError, DomainError, ShapeError
from distembed.gradcheck import check_gradients
from distembed.tensor import Tensor, no_grad

finite = st.floats(-5, 5, allow_nan=False)


def test_softplus_at_zero():
    assert T.elementwise("softplus", Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_add_vectors():
    out = T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_square_by_self_multiply_grad():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0])


def test_elementwise_arity_errors():
    with pytest.raises(ContractError):
        T.elementwise("add", Tensor(1.0))
    with pytest.raises(ContractError):
        T.elementwise("exp", Tensor(1.0), Tensor(1.0))
    with pytest.raises(ContractError):
        T.elementwise("nope", Tensor(1.0))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_log_and_sqrt_domain():
    with pytest.raises(DomainError):
        T.log(Tensor([0.0]))
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1.0]))


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    p = {"a": Tensor(rng.normal(size=(3, 4)), requires_grad=True), "b": Tensor(rng.normal(size=(4, 2)), requires_grad=True)}
    w = rng.normal(size=(3, 2))
    errs = check_gradients(lambda: T.tsum(T.matmul(p["a"], p["b"]) * w), p)
    assert max(errs.values()) <= 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    p = {"a": Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True), "b": Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)}
    w = rng.normal(size=(2, 3, 5))
    assert max(check_gradients(lambda: T.tsum(p["a"] @ p["b"] * w), p).values()) <= 1e-6


def test_concat_single_and_roundtrip():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4, 2)))
    np.testing.assert_array_equal(T.concat([a]).data, a.data)
    b = Tensor(rng.normal(size=(3, 4, 2)))
    c = T.concat([a, b], axis=-1)
    assert c.shape == (3, 4, 4)
    np.testing.assert_array_equal(c[..., :2].data, a.data)
    np.testing.assert_array_equal(c[..., 2:].data, b.data)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=-1)
    with pytest.raises(ContractError):
        T.concat([])


def test_log_softmax_examples():
    np.testing.assert_allclose(T.log_softmax(Tensor([0.0, 0.0])).data, [math.log(0.5)] * 2, atol=1e-15)
    probs = np.exp(T.log_softmax(Tensor([1.0, 2.0, 3.0])).data)
    np.testing.assert_allclose(probs, [0.0900, 0.2447, 0.6652], atol=5e-5)
    # frozen oracle values
    np.testing.assert_allclose(probs, [0.09003057317038046, 0.24472847105479764, 0.6652409557748219], atol=1e-15)


def test_log_softmax_nonfinite():
    with pytest.raises(DomainError):
        T.log_softmax(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_log_softmax_shift_invariance_and_normalization(x, c):
    a = T.log_softmax(Tensor(x)).data
    b = T.log_softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(np.exp(a).sum(-1), 1.0, atol=1e-12)


def test_backward_sum_and_detached():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    loss = T.tsum(z * 2.0) + T.tsum(y.detach())
    loss.backward()
    assert y.grad is None or np.all(y.grad == 0)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_shared_subexpression_visited_once():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    (y + y).backward()  # d(2x^2)/dx = 4x
    assert x.grad == pytest.approx(12.0)


def test_topological_order_parents_first():
    x = Tensor(1.0, requires_grad=True)
    y = T.exp(x)
    z = y * x + y
    order = T.topological_order(z)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]
    assert len(order) == len({id(t) for t in order})


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(2.0, requires_grad=True)
    (x * 3.0).backward()
    (x * 3.0).backward()
    assert x.grad == pytest.approx(6.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y._parents == ()


def test_numpy_operand_defers_to_tensor():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([3.0, 4.0]) - x
    assert isinstance(y, Tensor)
    T.tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [-1.0, -1.0])


def test_unbroadcast_gradient_shapes():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    T.tsum(a * b).backward()
    assert a.grad.shape == (3, 1) and b.grad.shape == (4,)
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_elementwise_ops_gradients():
    rng = np.random.default_rng(3)
    p = {
        "a": Tensor(rng.normal(size=(2, 3)), requires_grad=True),
        "b": Tensor(rng.uniform(0.5, 2, size=(2, 3)), requires_grad=True),
    }
    w = rng.normal(size=(2, 3))

    def loss():
        a, b = p["a"], p["b"]
        out = a / b + T.exp(a) * T.log(b) - T.sqrt(b) + T.square(a) + T.softplus(a) + T.relu(a) - a
        return T.tsum(out * w) + T.mean(T.transpose(a)) + T.tsum(T.reshape(a, (3, 2))[1])

    assert max(check_gradients(loss, p).values()) <= 1e-6


def test_getitem_gradient_repeated_index():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x[np.array([0, 0, 2])]).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_ops_are_finite_on_finite_input():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=100) * 30)
    for op in (T.exp, T.softplus, T.relu, T.square):
        assert np.all(np.isfinite(op(x).data))


def test_grad_shape_matches_data():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    T.tsum(T.exp(x)).backward()
    assert x.grad.shape == x.data.shape
