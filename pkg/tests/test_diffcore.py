import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evexit import diffcore as dc
from evexit.errors import ConfigurationError, ContractViolation, NumericError


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3) - 4.0
    out = dc.matmul(dc.Tensor(np.eye(3)), dc.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_softplus_analytic_value():
    assert dc.softplus(dc.Tensor(0.0)).item() == pytest.approx(np.log(2), abs=1e-12)


def test_softmax_hand_value():
    out = dc.softmax(dc.Tensor([2.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.880797, 0.119203], atol=1e-6)


def test_sum_gradient_is_ones():
    x = dc.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    dc.backward(dc.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_product_rule():
    x = dc.Tensor(2.0, requires_grad=True)
    y = dc.Tensor(3.0, requires_grad=True)
    dc.backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_softplus_gradient_at_zero():
    x = dc.Tensor(0.0, requires_grad=True)
    dc.backward(dc.softplus(x))
    assert x.grad == pytest.approx(0.5, abs=1e-15)


def test_quadratic_grad_check_tight():
    err = dc.grad_check(lambda t: dc.tsum(dc.square(t)),
                        np.random.default_rng(1).normal(size=12))
    assert err <= 1e-6


def test_repeated_use_sums_contributions():
    # z = x*y + x: node x feeds two consumers
    x = dc.Tensor(1.5, requires_grad=True)
    y = dc.Tensor(-2.0, requires_grad=True)
    dc.backward(x * y + x)
    assert x.grad == pytest.approx(-1.0)

    # equal to the sum of the two single-consumer gradients
    x1 = dc.Tensor(1.5, requires_grad=True)
    dc.backward(x1 * dc.Tensor(-2.0))
    x2 = dc.Tensor(1.5, requires_grad=True)
    dc.backward(x2 + 0.0)
    assert x.grad == x1.grad + x2.grad


def test_backward_rejects_non_scalar():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        dc.backward(x + 1.0)


def test_shape_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        dc.add(dc.Tensor([1.0, 2.0]), dc.Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ConfigurationError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_non_finite_output_names_operation():
    with pytest.raises(NumericError, match="exp"):
        dc.exp(dc.Tensor(1000.0))


def test_expand_last_requires_unit_axis():
    with pytest.raises(ConfigurationError):
        dc.expand_last(dc.Tensor(np.ones((2, 3))), 4)
    out = dc.expand_last(dc.Tensor(np.ones((2, 1))), 4)
    assert out.shape == (2, 4)


def test_expand_last_gradient_sums():
    x = dc.Tensor(np.array([[2.0], [3.0]]), requires_grad=True)
    dc.backward(dc.tsum(dc.expand_last(x, 5)))
    np.testing.assert_array_equal(x.grad, [[5.0], [5.0]])


def test_gradients_zero_initialized_between_passes():
    x = dc.Tensor([1.0, 1.0], requires_grad=True)
    dc.backward(dc.tsum(x * 2.0))
    dc.backward(dc.tsum(x * 2.0))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


@pytest.mark.parametrize("fn,point", [
    (lambda t: dc.tsum(dc.relu(t)), np.linspace(-2, 2, 9) + 0.01),
    (lambda t: dc.tsum(dc.softplus(t)), np.linspace(-5, 5, 11)),
    (lambda t: dc.tsum(dc.exp(t)), np.linspace(-2, 2, 7)),
    (lambda t: dc.tsum(dc.log(t)), np.linspace(0.2, 3, 7)),
    (lambda t: dc.tsum(dc.square(dc.softmax(t))), np.linspace(-2, 2, 8)),
    (lambda t: dc.mean(dc.square(t)), np.linspace(-2, 2, 10)),
    (lambda t: dc.tsum(dc.sum_last(dc.square(t)).__mul__(2.0)),
     np.arange(6.0).reshape(2, 3)),
    (lambda t: dc.tsum(dc.matmul(t, t)), np.arange(4.0).reshape(2, 2)),
    (lambda t: dc.tsum(dc.div(1.0, t)), np.linspace(0.5, 2, 6)),
])
def test_primitive_gradients_match_finite_differences(fn, point):
    assert dc.grad_check(fn, point) <= 1e-4


def test_primitive_gradients_at_random_points():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=5)
        worst = max(worst, dc.grad_check(
            lambda t: dc.tsum(dc.softmax(t) * dc.softplus(t)), x, rng=rng))
    assert worst <= 1e-4


@given(st.floats(min_value=-30, max_value=30))
def test_softplus_dominates_relu(x):
    value = dc.softplus(dc.Tensor(x)).item()
    assert value >= max(0.0, x)
    naive = np.log1p(np.exp(x))
    assert value == pytest.approx(naive, abs=1e-12)


@given(st.floats(min_value=-50, max_value=50), st.floats(min_value=1e-3, max_value=5))
def test_softplus_monotone(x, dx):
    lo = dc.softplus(dc.Tensor(x)).item()
    hi = dc.softplus(dc.Tensor(x + dx)).item()
    assert hi > lo


def test_softplus_stable_for_huge_inputs():
    big = dc.softplus(dc.Tensor(1e4)).item()
    assert big == pytest.approx(1e4)


@settings(max_examples=50)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10**6))
def test_fanout_two_consumers_sums(n, seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=n)

    def two_consumers(t):
        return dc.tsum(dc.square(t)) + dc.tsum(dc.softplus(t))

    x = dc.Tensor(values, requires_grad=True)
    dc.backward(two_consumers(x))
    combined = x.grad.copy()

    a = dc.Tensor(values, requires_grad=True)
    dc.backward(dc.tsum(dc.square(a)))
    b = dc.Tensor(values, requires_grad=True)
    dc.backward(dc.tsum(dc.softplus(b)))
    np.testing.assert_allclose(combined, a.grad + b.grad, atol=1e-15)


def test_detach_blocks_gradient():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    loss = dc.tsum(x.detach() * x)
    dc.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_grad_check_accepts_multiple_points():
    def f(a, b):
        return dc.tsum(a * b)

    err = dc.grad_check(f, [np.array([1.0, 2.0]), np.array([3.0, -1.0])])
    assert err <= 1e-8


def test_grad_check_rejects_bad_step():
    with pytest.raises(ConfigurationError):
        dc.grad_check(lambda t: dc.tsum(t), np.ones(3), step=0.0)
