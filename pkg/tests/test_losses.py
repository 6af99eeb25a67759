import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptfcl import tensor as T
from promptfcl.losses import C2LossParams, c2_loss, cross_entropy, fedprox_term, total_loss
from promptfcl.tensor import ShapeError, Tensor


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros(5), 2).item() == pytest.approx(math.log(5), abs=1e-15)
    assert cross_entropy(np.array([0.0, 1e3]), 1).item() == pytest.approx(0.0, abs=1e-12)
    assert abs(cross_entropy(np.array([1.0, 2.0]), 0).item() - 1.31326169) < 1e-8


def test_cross_entropy_batch_mean_and_errors():
    z = np.random.default_rng(0).normal(size=(3, 4))
    y = np.array([0, 3, 1])
    each = [cross_entropy(z[i], y[i]).item() for i in range(3)]
    assert cross_entropy(z, y).item() == pytest.approx(np.mean(each), abs=1e-15)
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(z, np.array([0, 4, 1]))


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_cross_entropy_nonnegative(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    assert cross_entropy(np.array(z), label).item() >= 0


def test_c2_examples():
    p = C2LossParams(gamma_c2l=1.0, margin=0.0)
    a = np.array([1.0, 0.0])
    assert c2_loss(a, a, [np.array([4.0, 0.0])], p).item() == 0.0
    assert c2_loss(np.array([1.0, 0]), np.zeros(2), [np.array([3.0, 0])], p).item() == 0.0
    p2 = C2LossParams(gamma_c2l=0.5, margin=0.1)
    v = c2_loss(np.array([2.0, 0]), np.zeros(2), [np.array([3.0, 0])], p2).item()
    assert abs(v - 1.6) < 1e-12


def test_c2_empty_negatives_is_zero():
    assert c2_loss(np.ones(3), np.zeros(3), [], C2LossParams()).item() == 0.0


def test_c2_shape_mismatch():
    with pytest.raises(ShapeError):
        c2_loss(np.ones(3), np.zeros(3), [np.zeros(4)], C2LossParams())
    with pytest.raises(ShapeError):
        c2_loss(np.ones(3), np.zeros(2), [np.zeros(3)], C2LossParams())


def test_c2_params_validated():
    with pytest.raises(ValueError):
        C2LossParams(gamma_c2l=0.0)
    with pytest.raises(ValueError):
        C2LossParams(margin=1.5)
    with pytest.raises(ValueError):
        C2LossParams(lambda_c2l=-0.1)


def test_c2_gradient_only_into_current():
    cur = Tensor([2.0, 0.0], requires_grad=True)
    prev = Tensor([0.0, 0.0], requires_grad=True)
    other = Tensor([3.0, 0.0], requires_grad=True)
    T.backward(c2_loss(cur, prev, [other], C2LossParams(0.5, 0.1)))
    # d/dcur [|cur| - 0.5 |cur - other|] = [1, 0] - 0.5 * [-1, 0]
    assert np.allclose(cur.grad, [1.5, 0.0])
    assert prev.grad is None and other.grad is None


def test_c2_tie_takes_first_negative():
    cur = Tensor([0.0, 0.0], requires_grad=True)
    near = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    T.backward(c2_loss(cur, np.array([5.0, 5.0]), near, C2LossParams(0.5, 0.5)))
    drift = (cur.data - np.array([5.0, 5.0])) / np.linalg.norm([5.0, 5.0])
    assert np.allclose(cur.grad, drift - 0.5 * (cur.data - near[0]) / 1.0)


def test_c2_inactive_hinge_has_zero_grad():
    cur = Tensor([1.0, 0.0], requires_grad=True)
    T.backward(c2_loss(cur, np.array([1.0, 0.0]), [np.array([9.0, 0.0])], C2LossParams(1.0, 0.0)))
    assert np.array_equal(cur.grad, [0.0, 0.0])


small = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)


@settings(max_examples=60)
@given(small, small, st.lists(small, max_size=3), st.floats(0.05, 2), st.floats(0, 1), st.floats(0, 1))
def test_c2_nonnegative_and_monotone_in_margin(cur, prev, others, gamma, m1, m2):
    lo, hi = sorted((m1, m2))
    a = c2_loss(cur, prev, others, C2LossParams(gamma, lo)).item()
    b = c2_loss(cur, prev, others, C2LossParams(gamma, hi)).item()
    assert 0 <= a <= b


def test_fedprox_examples():
    x = np.random.default_rng(0).normal(size=(2, 3))
    assert fedprox_term([x], [x], 0.7).item() == 0.0
    assert fedprox_term([np.array([1.0, 1.0])], [np.zeros(2)], 2.0).item() == 2.0
    assert fedprox_term([x], [np.zeros_like(x)], 0.0).item() == 0.0
    with pytest.raises(ShapeError):
        fedprox_term([np.ones(2)], [np.ones(3)], 1.0)
    with pytest.raises(ValueError):
        fedprox_term([np.ones(2)], [np.ones(2)], -1.0)


def test_fedprox_grad_into_local_only():
    local = Tensor([1.0, 2.0], requires_grad=True)
    glob = Tensor([0.0, 0.0], requires_grad=True)
    T.backward(fedprox_term([local], [glob], 0.5))
    assert np.allclose(local.grad, 0.5 * local.data)
    assert glob.grad is None


def test_total_loss():
    assert total_loss(Tensor(1.3), Tensor(9.0), 0.0).item() == 1.3
    assert total_loss(Tensor(1.0), Tensor(2.0), 0.5).item() == 2.0


def test_total_loss_gradient_linearity():
    rng = np.random.default_rng(4)
    P0 = rng.normal(size=(2, 3))
    W = rng.normal(size=(3, 2))
    prev, others = rng.normal(size=(2, 3)), [rng.normal(size=(2, 3)) * 3]
    params = C2LossParams(0.1, 1.0, 0.3)

    def grad_of(fn):
        P = Tensor(P0, requires_grad=True)
        T.backward(fn(P))
        return P.grad

    ce = lambda P: cross_entropy((P @ Tensor(W)).reshape(-1), 1)
    c2 = lambda P: c2_loss(P, prev, others, params)
    g_total = grad_of(lambda P: total_loss(ce(P), c2(P), 0.3))
    assert np.allclose(g_total, grad_of(ce) + 0.3 * grad_of(c2), atol=1e-14)
