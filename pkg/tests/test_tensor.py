import numpy as np
import pytest

from cascadeseg.tensor import Tensor, backward, no_grad, total, zero_grads

from grad_cases import CASES, TOL, run_case


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    backward(total(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_repeated_backward_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(total(x * x))
    backward(total(x * x))
    np.testing.assert_allclose(x.grad, 4 * x.data)
    zero_grads([x])
    assert np.all(x.grad == 0)


def test_disconnected_leaf_gets_exact_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    backward(total(x * 3.0))
    assert np.array_equal(y.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_shared_subexpression_gradients_add():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    backward(total(y + y))
    np.testing.assert_allclose(x.grad, [8.0])


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    assert run_case(name) < TOL
