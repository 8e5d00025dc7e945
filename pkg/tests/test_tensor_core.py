"""
Tests for the autodiff engine: primitive gradients, broadcasting, graph API and errors
"""

import numpy as np
import pytest

from tensor_core import (
    Graph, GraphError, ShapeError, Tensor, backward, concat, embedding, forward, gelu, grad_check,
    logsumexp, matmul, softmax, take_along_last,
)

TOL = 1e-6


def _rand(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if positive else x


# --- primitive gradients --- #

@pytest.mark.parametrize("name,fn,positive", [
    ("add", lambda x: (x + x * 2.0).sum(), False),
    ("sub", lambda x: (3.0 - x * x).sum(), False),
    ("mul", lambda x: (x * x * x).sum(), False),
    ("div", lambda x: (1.0 / x + x / 3.0).sum(), True),
    ("neg", lambda x: (-(x * x)).sum(), False),
    ("pow", lambda x: (x ** 3).sum(), False),
    ("exp", lambda x: x.exp().sum(), False),
    ("log", lambda x: x.log().sum(), True),
    ("tanh", lambda x: x.tanh().sum(), False),
    ("gelu", lambda x: gelu(x).sum(), False),
    ("mean", lambda x: (x * x).mean(axis=1).sum(), False),
    ("reshape", lambda x: (x.reshape(-1) * x.reshape(-1)).sum(), False),
    ("transpose", lambda x: (x.T @ x).sum(), False),
    ("logsumexp", lambda x: logsumexp(x, axis=-1).sum(), False),
])
def test_elementwise_and_reduction_gradients(rng, name, fn, positive):
    x = Tensor(_rand(rng, 3, 4, positive=positive), dtype=np.float64)
    assert grad_check(fn, x) < TOL, name


def test_softmax_gradient(rng):
    w = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    x = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    assert grad_check(lambda t: (softmax(t, axis=-1) * w).sum(), x) < TOL


def test_matmul_gradient_both_sides(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    assert grad_check(lambda t: (matmul(t, Tensor(b)) ** 2).sum(), Tensor(a)) < TOL
    assert grad_check(lambda t: (matmul(Tensor(a), t) ** 2).sum(), Tensor(b)) < TOL


def test_batched_matmul_broadcasts_weight(rng):
    x = rng.normal(size=(2, 4, 3))
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype=np.float64)
    out = (Tensor(x) @ w).sum()
    out.backward()
    np.testing.assert_allclose(w.grad, x.sum(axis=(0, 1))[:, None].repeat(2, axis=1))


def test_getitem_concat_and_gathers(rng):
    x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    ids = np.array([1, 0, 3, 5])
    assert grad_check(lambda t: (t[1:3] * t[1:3]).sum(), x) < TOL
    assert grad_check(lambda t: (concat([t, t * 2.0], axis=0) ** 2).sum(), x) < TOL
    assert grad_check(lambda t: (embedding(t, [0, 3, 3]) ** 2).sum(), x) < TOL
    assert grad_check(lambda t: (take_along_last(t, ids) ** 2).sum(), x) < TOL


def test_broadcast_gradient_sums_back_to_operand_shape(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    (x + b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_embedding_repeated_ids_accumulate():
    w = Tensor(np.zeros((5, 2)), requires_grad=True, dtype=np.float64)
    embedding(w, [1, 1, 4]).sum().backward()
    np.testing.assert_array_equal(w.grad[:, 0], [0, 2, 0, 0, 1])


# --- accumulation and graph API --- #

def test_leaf_gradients_accumulate_until_zeroed(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 5.0))
    x.zero_grad()
    assert x.grad is None


def test_graph_forward_backward_with_named_outputs(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
    graph = Graph(lambda a, b: {"prod": (a * b).sum(), "sq": (a * a).sum()}, name="pair")
    outputs = forward(graph, {"a": a, "b": b})
    assert set(outputs) == {"prod", "sq"}
    grads = backward(graph)
    np.testing.assert_allclose(grads["a"], b.data + 2 * a.data)
    np.testing.assert_allclose(grads["b"], a.data)


def test_graph_backward_resets_input_gradients(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    graph = Graph(lambda a: (a * a).sum())
    forward(graph, {"a": a})
    first = backward(graph)["a"].copy()
    second = backward(graph)["a"]
    np.testing.assert_array_equal(first, second)


def test_graph_non_scalar_output_needs_seed(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    graph = Graph(lambda a: a * 2.0)
    forward(graph, {"a": a})
    with pytest.raises(GraphError):
        backward(graph)
    grads = backward(graph, {"out": np.ones(3)})
    np.testing.assert_array_equal(grads["a"], np.full(3, 2.0))


def test_graph_backward_before_forward():
    with pytest.raises(GraphError):
        Graph(lambda a: a).backward()


def test_unused_input_gets_zero_gradient(rng):
    a = Tensor(rng.normal(size=2), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=2), requires_grad=True, dtype=np.float64)
    graph = Graph(lambda a, b: (a * a).sum())
    forward(graph, {"a": a, "b": b})
    np.testing.assert_array_equal(backward(graph)["b"], np.zeros(2))


# --- errors --- #

def test_matmul_shape_error_names_operation():
    with pytest.raises(ShapeError, match=r"matmul: incompatible shapes \(2, 3\) x \(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_add_shape_error_is_value_error():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_backward_from_constant_output_fails():
    with pytest.raises(GraphError):
        (Tensor(np.ones(2)) * 2.0).sum().backward()


def test_grad_check_rejects_non_scalar_and_bad_eps(rng):
    x = Tensor(rng.normal(size=3))
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2.0, x)
    with pytest.raises(ValueError):
        grad_check(lambda t: t.sum(), x, eps=0)


def test_integer_input_promoted_to_float():
    assert Tensor([1, 2, 3]).dtype == np.float32
