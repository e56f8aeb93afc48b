import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from moalign import tensor as tc
from moalign.gradcheck import finite_diff_check
from moalign.tensor import GraphError, Tensor


def test_silu_relu_values():
    assert float(tc.silu(Tensor(0.0)).data) == 0.0
    assert float(tc.relu(Tensor(-1.0)).data) == 0.0
    assert float(tc.silu(Tensor(1.0)).data) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert float(tc.silu(Tensor(1.0)).data) == pytest.approx(0.731059, abs=1e-6)


@pytest.mark.parametrize("fn", [tc.silu, tc.relu])
def test_activation_grad_at_half(fn):
    x = Tensor(np.array([0.5]), requires_grad=True)
    fn(x).sum().backward()
    h = 1e-6
    num = (float(fn(Tensor(0.5 + h)).data) - float(fn(Tensor(0.5 - h)).data)) / (2 * h)
    assert abs(x.grad[0] - num) <= 1e-6


def test_relu_subgradient_zero_at_kink():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    tc.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_cosine_sim_examples():
    a = Tensor([1.0, 2.0])
    assert float(tc.cosine_sim(a, a).data) == pytest.approx(1.0, abs=1e-12)
    assert float(tc.cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 0.0
    assert float(tc.cosine_sim(Tensor([1.0, 2.0]), Tensor([2.0, 1.0])).data) == pytest.approx(0.8, abs=1e-12)


def test_cosine_sim_zero_vector_is_finite():
    v = tc.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 2.0]))
    assert np.isfinite(v.data) and float(v.data) == 0.0


def test_cosine_sim_length_mismatch():
    with pytest.raises(ValueError, match="lengths differ"):
        tc.cosine_sim(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_sum_grad_all_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_mean_square_grad_closed_form():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tc.mean(x * x).backward()
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0], atol=1e-15)


def test_second_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        (x * 2).backward()


def test_shared_input_accumulates_once_per_use():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_builds_no_record():
    x = Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    (x * b).sum().backward()
    assert x.grad.shape == x.shape and b.grad.shape == b.shape


def test_finite_diff_sum_exact(rng):
    rep = finite_diff_check(lambda x: x.sum(), Tensor(rng.standard_normal((3, 4)), requires_grad=True))
    assert rep.passed and rep.max_rel_err < 1e-8


def test_finite_diff_detects_corrupted_backward(rng):
    def bad_square(a):
        return Tensor._from_op(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,), "bad_square")

    rep = finite_diff_check(lambda x: bad_square(x).sum(), Tensor(rng.uniform(0.5, 1, 5), requires_grad=True))
    assert not rep.passed


def test_finite_diff_rejects_non_scalar_and_float32():
    with pytest.raises(ValueError, match="scalar"):
        finite_diff_check(lambda x: x * 2, Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(TypeError):
        finite_diff_check(lambda x: x.sum(), Tensor(np.ones(3, dtype=np.float32), requires_grad=True))


@pytest.mark.parametrize("shape", [(3,), (2, 3), (4, 1, 2), (2, 2, 2, 2), (5, 3)])
@pytest.mark.parametrize("name,fn", [
    ("silu", tc.silu), ("gelu", tc.gelu), ("tanh", tc.tanh), ("sigmoid", tc.sigmoid),
    ("softmax", lambda x: tc.softmax(x, -1)), ("layer_norm", tc.layer_norm),
    ("l2_normalize", lambda x: tc.l2_normalize(x, -1)),
])
def test_ops_pass_gradcheck_on_several_shapes(name, fn, shape):
    rng = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    w = rng.standard_normal(shape)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    assert finite_diff_check(lambda x: (fn(x) * Tensor(w)).sum(), x).passed


def test_linear_ops_are_adjoint(rng):
    # <L x, y> == <x, L^T y> where L^T is obtained by backpropagating y
    cases = [
        (lambda x: tc.transpose(x, (2, 0, 1)), (2, 3, 4)),
        (lambda x: tc.reshape(x, (6, 4)), (2, 3, 4)),
        (lambda x: x[:, 1:3], (2, 4, 3)),
        (lambda x: tc.pad_edge(x, [(1, 2), (0, 1)]), (3, 4)),
        (lambda x: tc.tsum(x, axis=1), (3, 4, 2)),
        (lambda x: tc.concat([x, x * 2.0], axis=0), (2, 3)),
    ]
    for op, shape in cases:
        x = Tensor(rng.standard_normal(shape), requires_grad=True)
        y = op(x)
        ybar = rng.standard_normal(y.shape)
        (y * Tensor(ybar)).sum().backward()
        lhs = float(np.sum(op(Tensor(x.data)).data * ybar))
        rhs = float(np.sum(x.data * x.grad))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_python_scalars_keep_tensor_dtype():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 0.5 + 1).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-5, 5)))
def test_broadcast_add_grad_reduces_to_input_shape(a):
    x = Tensor(a, requires_grad=True)
    b = Tensor(np.ones((2,) + a.shape), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(a.shape, 2.0))
    np.testing.assert_array_equal(b.grad, np.ones(b.shape))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5),
                  elements=st.floats(-20, 20)))
def test_forward_ops_stay_finite(a):
    x = Tensor(a)
    for fn in (tc.silu, tc.gelu, tc.sigmoid, tc.tanh, tc.relu, lambda t: tc.softmax(t, -1),
               lambda t: tc.l2_normalize(t, -1)):
        assert np.all(np.isfinite(fn(x).data))
