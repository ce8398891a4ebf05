import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from escmisr.tensor import (ContractError, GradTape, NonFiniteError, Tensor, concat, no_grad, stack, take,
                            where)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_sum_gradient_is_ones(rng):
    x = leaf(rng.standard_normal((3, 4)))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_sum_of_squares_gradient(rng):
    a = rng.standard_normal((5,))
    x = leaf(a)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * a)


def test_backward_on_non_scalar_is_contract_error():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_grad_shape_matches_data(rng):
    x = leaf(rng.standard_normal((2, 3)))
    b = leaf(rng.standard_normal((3,)))
    ((x + b) * (x - b)).mean().backward()
    assert x.grad.shape == x.shape
    assert b.grad.shape == b.shape


def test_tape_visits_each_node_once():
    calls = []
    x = leaf(np.array(2.0))

    def tracked(t, name):
        out = t * 1.0
        original = out._backward

        def wrapped(g):
            calls.append(name)
            return original(g)

        out._backward = wrapped
        return out

    a = tracked(x, "a")
    b = tracked(a, "b")
    c = tracked(a, "c")
    root = b * c
    tape = GradTape.from_root(root)
    assert len(tape) == len({id(n) for n in tape.nodes})
    root.backward()
    assert sorted(calls) == ["a", "b", "c"]
    assert calls[-1] == "a"  # after both consumers
    assert x.grad == pytest.approx(2 * 2.0)


def test_reverse_topological_order():
    x = leaf(np.array(1.5))
    y = x * x
    z = y + x
    w = z * y
    tape = GradTape.from_root(w)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_no_grad_records_nothing(rng):
    x = leaf(rng.standard_normal(3))
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        leaf(np.array([-1.0])).log()
    with pytest.raises(NonFiniteError):
        leaf(np.array([1000.0])).exp()


def test_gradient_accumulates_across_calls(rng):
    x = leaf(rng.standard_normal(4))
    x.sum().backward()
    x.sum().backward()
    assert np.array_equal(x.grad, 2 * np.ones(4))


def test_advanced_index_with_repeats(rng):
    x = leaf(rng.standard_normal(5))
    idx = np.array([0, 0, 3])
    x[idx].sum().backward()
    assert np.array_equal(x.grad, [2, 0, 0, 1, 0])


def test_take_scatters_into_table(rng):
    table = leaf(rng.standard_normal((2, 4)))
    idx = np.array([[0, 1], [1, 1]])
    take(table, idx).sum().backward()
    assert np.array_equal(table.grad, [[1, 3, 0, 0]] * 2)


def test_concat_stack_where_shapes(rng):
    a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((2, 3)))
    assert concat([a, b], axis=0).shape == (4, 3)
    assert stack([a, b], axis=2).shape == (2, 3, 2)
    m = np.array([[True, False, True], [False, False, True]])
    where(m, a, b).sum().backward()
    assert np.array_equal(a.grad, m.astype(float))
    assert np.array_equal(b.grad, (~m).astype(float))


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)


@given(hnp.arrays(np.float64, shapes, elements=st.floats(-3, 3)))
def test_broadcast_add_grad_sums_over_broadcast_axes(a):
    x = leaf(a)
    bias = leaf(np.zeros(a.shape[-1:]))
    (x + bias).sum().backward()
    assert np.allclose(bias.grad, np.prod(a.shape[:-1]))


@given(hnp.arrays(np.float64, shapes, elements=st.floats(-3, 3)))
def test_forward_of_finite_input_is_finite(a):
    x = Tensor(a)
    for y in (x * x, x.exp(), (x * x + 1.0).sqrt(), x.mean(), x.sum(axis=0)):
        assert np.all(np.isfinite(y.data))


def test_dtype_is_preserved():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0 + 1.0).dtype == np.float32
    assert Tensor(np.arange(3)).dtype == np.float32
