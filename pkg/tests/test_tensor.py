import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kplab import tensor as T
from kplab.errors import DimensionError, NonFiniteError, UsageError
from kplab.tensor import Tensor

from oracles import central_diff, conv2d_loops, random_problem, rel_err


def test_matmul_identity_and_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((3, 5, 4))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)
    single = T.conv2d(Tensor(x[:1]), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(single.data, x[:1])


def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv_zero_kernel(rng):
    out = T.conv2d(Tensor(rng.standard_normal((2, 6, 6))), Tensor(np.zeros((4, 2, 3, 3))), pad=1)
    assert out.shape == (4, 6, 6)
    assert not out.data.any()


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    # padding makes it fit
    assert T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), pad=1).shape == (1, 2, 2)


def test_conv_is_cross_correlation():
    x = np.arange(9.0).reshape(1, 3, 3)
    k = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
    # no flip: the top-left kernel tap reads the top-left of each window
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data[0], [[0, 1], [3, 4]])


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 8), w=st.integers(3, 8),
       k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 10_000))
def test_conv_matches_loops(c, o, h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, kern = r.standard_normal((c, h, w)), r.standard_normal((o, c, k, k))
    got = T.conv2d(Tensor(x), Tensor(kern), stride=stride, pad=pad).data
    assert got.shape == (o, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
    np.testing.assert_allclose(got, conv2d_loops(x, kern, stride, pad), atol=1e-12)


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_mse_identical_is_zero(rng):
    v = rng.standard_normal((3, 4))
    assert T.mse(Tensor(v), Tensor(v)).item() == 0.0


def test_mse_is_batch_mean_of_squared_norms():
    a = Tensor([[1.0, 2.0], [0.0, 0.0]])
    b = Tensor([[0.0, 0.0], [3.0, 4.0]])
    assert T.mse(a, b).item() == pytest.approx((5.0 + 25.0) / 2)
    with pytest.raises(DimensionError):
        T.mse(a, Tensor([1.0, 2.0]))


def test_crossentropy_uniform_logits():
    assert T.softmax_crossentropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(np.log(2), abs=1e-15)


@pytest.mark.parametrize("target", [-1, 2, 5])
def test_crossentropy_bad_class(target):
    with pytest.raises(UsageError):
        T.softmax_crossentropy(Tensor([[0.0, 1.0]]), [target])


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * 0.0).sum() + 3.0
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x * 2.0 + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 3.0])


def test_diamond_graph_visits_once():
    x = Tensor([1.5], requires_grad=True)
    a = T.exp(x)
    loss = (a * a + a).sum()
    loss.backward()
    e = np.exp(1.5)
    np.testing.assert_allclose(x.grad, [2 * e * e + e])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    arrays, loss_fn = random_problem(seed)
    params = [Tensor(a, requires_grad=True) for a in arrays]
    loss_fn(params).backward()
    for i, a in enumerate(arrays):
        def f(v, i=i):
            with T.no_grad():
                ps = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
                return loss_fn(ps).item()
        fd = central_diff(f, a)
        assert rel_err(params[i].grad, fd).max() < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_backward_is_linear(seed):
    arrays, loss_fn = random_problem(seed)
    arrays2, loss_fn2 = random_problem(seed + 4)   # same kind, different data

    def grads(combine):
        ps = [Tensor(a, requires_grad=True) for a in arrays]
        combine(ps).backward()
        return [p.grad for p in ps]

    a, b = 0.7, -1.9
    g1 = grads(lambda p: loss_fn(p))
    g2 = grads(lambda p: (loss_fn(p) * loss_fn(p)))
    g = grads(lambda p: loss_fn(p) * a + (loss_fn(p) * loss_fn(p)) * b)
    for x, y, z in zip(g1, g2, g):
        np.testing.assert_allclose(z, a * x + b * y, rtol=0, atol=1e-10)


def test_forward_is_deterministic():
    arrays, loss_fn = random_problem(1)
    v1 = loss_fn([Tensor(a) for a in arrays]).data
    v2 = loss_fn([Tensor(a) for a in arrays]).data
    assert v1.tobytes() == v2.tobytes()


def test_upsample_and_pool_adjoint(rng):
    # <up(a), b> == <a, blocksum(b)> with pooling = blocksum / k^2
    a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 6, 6))
    up = T.upsample_blocks(Tensor(a), 2, 2).data
    pooled = T.avg_pool2d(Tensor(b), 2).data
    assert np.sum(up * b) == pytest.approx(4 * np.sum(a * pooled))
