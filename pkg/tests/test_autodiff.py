import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctcprompt import autodiff as ad
from ctcprompt.autodiff import Tensor

import gradcases


def test_square_sum_gradient():
    x = Tensor([2.0, -3.0], requires_grad=True)
    ad.reduce_sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, -6.0])


def test_diamond_graph_accumulates_both_paths():
    a = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    b = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    shared = a * b
    loss = ad.reduce_sum(shared + shared * a)
    loss.backward()
    # d/da (ab + a^2 b) = b + 2ab
    np.testing.assert_allclose(a.grad, b.data + 2 * a.data * b.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(b.grad, a.data + a.data ** 2, rtol=0, atol=1e-15)


def test_backward_adds_into_existing_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.reduce_sum(ad.scale(x, 3.0)).backward()
    ad.reduce_sum(ad.scale(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((4, 5))

    def grads():
        x = Tensor(data.copy(), requires_grad=True)
        ad.reduce_sum(ad.log_softmax(ad.matmul(x, Tensor(data.T)))).backward()
        return x.grad

    np.testing.assert_array_equal(grads(), grads())


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad and y._grad_fn is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        (x * x).backward()


def test_unknown_op():
    with pytest.raises(ad.UnknownOpError):
        ad.forward("convolve3d", [Tensor([1.0])])


@pytest.mark.parametrize(
    "fn, shapes",
    [
        (ad.matmul, [(2, 3), (4, 2)]),
        (ad.add, [(2, 3), (2,)]),
        (ad.mul, [(2, 3), (3, 2)]),
        (lambda a: ad.conv1d_strided(a, Tensor(np.ones((3, 2, 2))), 1), [(2, 2)]),
    ],
)
def test_shape_errors(fn, shapes):
    with pytest.raises(ad.ShapeError):
        fn(*(Tensor(np.ones(s)) for s in shapes))


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros((2, 4)))).data
    np.testing.assert_allclose(out, 0.25, rtol=0, atol=1e-15)


def test_masked_fill_keeps_softmax_finite():
    scores = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = ad.softmax(ad.masked_fill(scores, np.array([[False, True, True]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-300)


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((7, 2)), rng.standard_normal((3, 2, 4))
    out = ad.conv1d_strided(Tensor(x), Tensor(w), 2).data
    ref = np.array([sum(x[2 * t + k] @ w[k] for k in range(3)) for t in range(3)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pick_selects_per_row():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.pick(a, [2, 0]).data, [2.0, 3.0])


@pytest.mark.parametrize("name", sorted(gradcases.OP_CASES))
def test_op_gradients(name):
    errors = [gradcases.run_case(gradcases.OP_CASES[name], d, base_seed=11) for d in range(10)]
    assert max(errors) < 1e-4, errors


def test_grad_check_entry_point():
    rng = np.random.default_rng(0)
    assert ad.grad_check("layer_norm", [rng.standard_normal((3, 4)), np.ones(4), np.zeros(4)]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)))
def test_log_softmax_matches_logsumexp(x):
    lsm = ad.log_softmax(Tensor(x)).data
    lse = ad.logsumexp(Tensor(x)).data
    np.testing.assert_allclose(lsm, x - lse[:, None], atol=1e-12)
