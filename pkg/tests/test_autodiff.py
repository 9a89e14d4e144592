import numpy as np
import pytest

import gradcheck
from dira import autodiff as ad
from dira.errors import ContractError, DimensionError


@pytest.mark.parametrize("op", sorted(gradcheck.CASES))
def test_gradients_match_finite_differences(op):
    assert gradcheck.run_op(op, n_cases=100) < gradcheck.REL_TOL


def test_matmul_identity_and_zero():
    out = ad.matmul(ad.Tensor([[1, 0], [0, 1]]), ad.Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])
    out = ad.matmul(ad.Tensor([[1, 2]]), ad.Tensor([[0], [0]]))
    np.testing.assert_array_equal(out.data, [[0]])


def test_matmul_fixed_shapes_gradcheck():
    rng = np.random.default_rng(3)
    err = gradcheck.check(ad.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], rng)
    assert err < gradcheck.REL_TOL


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_conv_scalar_kernel_doubles():
    out = ad.conv2d(ad.Tensor(np.ones((1, 3, 3))), ad.Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_zero_kernel():
    x = np.random.default_rng(0).standard_normal((2, 5, 5))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.zeros((3, 2, 3, 3))))
    assert out.shape == (3, 3, 3) and not out.data.any()


def test_conv_fixed_shapes_gradcheck():
    rng = np.random.default_rng(4)
    err = gradcheck.check(ad.conv2d, [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))], rng)
    assert err < gradcheck.REL_TOL


def test_conv_is_cross_correlation():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 2, 2), dtype=np.float32)
    k[0, 0, 0, 0] = 1.0  # picks the top-left of each window
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k))
    np.testing.assert_array_equal(out.data[0, 0], [[0, 1], [3, 4]])


def test_conv_stride_and_padding_shapes():
    out = ad.conv2d(ad.Tensor(np.ones((1, 2, 7, 7))), ad.Tensor(np.ones((4, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)
    # corners see a 2x2 patch of ones per channel
    assert out.data[0, 0, 0, 0] == 8.0


@pytest.mark.parametrize("x_shape,k_shape", [((3, 5, 5), (2, 2, 3, 3)), ((1, 2, 2), (1, 1, 3, 3))])
def test_conv_dimension_errors(x_shape, k_shape):
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones(x_shape)), ad.Tensor(np.ones(k_shape)))


def test_cross_entropy_uniform_and_saturated():
    assert ad.softmax_cross_entropy(ad.Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(np.log(2), rel=1e-6)
    assert ad.softmax_cross_entropy(ad.Tensor([[100.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((4, 3)).astype(np.float32)
    y = np.array([0, 2, 1, 2])
    t = ad.Tensor(z, requires_grad=True)
    ad.softmax_cross_entropy(t, y).backward()
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(t.grad, p / 4, rtol=1e-5, atol=1e-7)
    assert gradcheck.check(lambda a: ad.softmax_cross_entropy(a, y), [z], rng) < gradcheck.REL_TOL


def test_cross_entropy_large_logits_finite():
    loss = ad.softmax_cross_entropy(ad.Tensor([[1e4, -1e4, 0.0]]), [1])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(2e4, rel=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_of_sum_is_ones():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_zero_times_x_is_zero():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    ad.sum_all(ad.mul(x, 0.0)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_reused_tensor_accumulates():
    x = ad.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    ad.sum_all(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])


def test_grad_accumulates_across_backward_calls():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.mul(x, 2.0).backward()


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_tape_records_in_creation_order():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.relu(ad.matmul(x, x))
        ad.sum_all(y)
    assert [n.op for n in tape.nodes] == ["matmul", "relu", "sum"]
    ids = [n.id for n in tape.nodes]
    assert ids == sorted(ids)


def test_composite_mlp_gradient():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, size=5)

    def net(w0, b0, w1, b1):
        h = ad.relu(ad.add(ad.matmul(ad.Tensor(x.astype(w0.dtype)), w0), b0))
        return ad.softmax_cross_entropy(ad.add(ad.matmul(h, w1), b1), y)

    inputs = [rng.standard_normal((4, 6)), rng.standard_normal(6) * 0.1, rng.standard_normal((6, 3)),
              rng.standard_normal(3)]
    assert gradcheck.check(net, inputs, rng) < gradcheck.REL_TOL


def test_float32_default():
    assert ad.Tensor([1, 2]).dtype == np.float32
    assert ad.matmul(ad.Tensor([[1.0]]), ad.Tensor([[2.0]])).dtype == np.float32
