import itertools

import numpy as np
import pytest

from helpers import grad_check, relative_error
from tripletvol.errors import ConfigError, ContractError, ShapeError
from tripletvol.layers import (
    Conv3d,
    ConvBlock,
    PReLU,
    ResidualBlock,
    conv3d,
    conv_output_extent,
    dense,
    instance_norm,
    prelu,
    residual_block,
    sigmoid,
)
from tripletvol.tensor import Tensor, backward, finite_diff_gradient


def conv3d_loops(x, w, b, stride, pad):
    """Direct evaluation of the convolution sum, one output voxel at a time."""
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    n, _, d, h, wd = x.shape
    o, _, k, _, _ = w.shape
    ext = [(e + 2 * pad - k) // stride + 1 for e in (d, h, wd)]
    out = np.zeros((n, o, *ext))
    for bi, oi, z, y, xx in itertools.product(range(n), range(o), *(range(e) for e in ext)):
        patch = xp[bi, :, z * stride : z * stride + k, y * stride : y * stride + k, xx * stride : xx * stride + k]
        out[bi, oi, z, y, xx] = b[oi] + np.sum(w[oi] * patch)
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5), (3, 1, 2)])
def test_conv3d_matches_direct_sum(stride, pad, k):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 3, 6, 7, 5))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv3d_loops(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 5, 3))
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1))).data
    np.testing.assert_array_equal(out, x)


def test_conv3d_all_ones_kernel_on_constant():
    v = 1.75
    out = conv3d(Tensor(np.full((1, 1, 6, 6, 6), v)), Tensor(np.ones((1, 1, 3, 3, 3)))).data
    np.testing.assert_allclose(out, 27 * v)


def test_conv3d_output_extent():
    assert conv_output_extent(8, 3, 2, 1) == 4
    out = conv3d(Tensor(np.zeros((1, 1, 8, 8, 8))), Tensor(np.zeros((2, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, 4, 4, 4)


def test_conv3d_same_padding_preserves_extent():
    layer = Conv3d(2, 3, 3, stride=1, rng=np.random.default_rng(0))
    assert layer(Tensor(np.zeros((1, 2, 5, 6, 7), dtype=np.float32))).shape == (1, 3, 5, 6, 7)


def test_conv3d_shape_errors():
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_conv3d_gradients():
    rng = np.random.default_rng(1)
    for stride, pad in [(1, 1), (2, 1), (2, 0)]:
        x = rng.normal(size=(2, 2, 4, 5, 3))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        assert grad_check(lambda x, w, b: conv3d(x, w, b, stride, pad), [x, w, b], rng) < 1e-6


def test_instance_norm_constant_channel_is_zero():
    x = Tensor(np.full((1, 2, 3, 3, 3), 4.0))
    out = instance_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, 0.0)


def test_instance_norm_moments():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 5.0, size=(3, 4, 5, 4, 3))
    out = instance_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    mu = out.mean(axis=(2, 3, 4))
    var = out.var(axis=(2, 3, 4))
    assert np.abs(mu).max() < 1e-5
    assert np.abs(var - 1).max() < 1e-4


def test_instance_norm_affine():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 6, 6, 6))
    x = (x - x.mean()) / x.std()
    out = instance_norm(Tensor(x), Tensor([2.0]), Tensor([3.0]), eps=1e-12).data
    np.testing.assert_allclose(out.mean(), 3.0, atol=1e-9)
    np.testing.assert_allclose(out.std(), 2.0, atol=1e-6)


def test_instance_norm_single_voxel_rejected():
    with pytest.raises(ContractError):
        instance_norm(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]))


def test_instance_norm_gradients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 3, 2, 2))
    assert grad_check(instance_norm, [x, rng.normal(size=3), rng.normal(size=3)], rng) < 1e-6


def test_prelu_examples():
    out = prelu(Tensor(np.array([5.0, -2.0]).reshape(1, 2)), np.array([0.25, 0.25])).data
    np.testing.assert_allclose(out, [[5.0, -0.5]])
    x = np.random.default_rng(5).normal(size=(2, 3, 2, 2, 2))
    np.testing.assert_array_equal(prelu(Tensor(x), np.ones(3)).data, x)


def test_prelu_gradients():
    rng = np.random.default_rng(6)
    assert grad_check(prelu, [rng.normal(size=(2, 3, 2, 3, 2)), rng.uniform(0, 0.5, 3)], rng) < 1e-6
    assert grad_check(prelu, [rng.normal(size=(4, 5)), rng.uniform(0, 0.5, 5)], rng) < 1e-6


def test_prelu_module_fixed_slope_has_no_parameters():
    assert PReLU(4, learnable=False).parameters() == []
    assert len(PReLU(4).parameters()) == 1


def test_dense_examples():
    x = np.random.default_rng(7).normal(size=(3, 4))
    np.testing.assert_allclose(dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    np.testing.assert_allclose(dense(Tensor([[1.0, 1.0]]), Tensor([[1.0, 1.0]]), Tensor([0.5])).data, [[2.5]])
    out = dense(Tensor(np.zeros((4, 512))), Tensor(np.zeros((256, 512))), Tensor(np.zeros(256)))
    assert out.shape == (4, 256)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


def test_dense_gradients():
    rng = np.random.default_rng(8)
    assert grad_check(dense, [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)], rng) < 1e-6


def test_sigmoid_examples():
    np.testing.assert_allclose(sigmoid(Tensor([0.0])).data, [0.5])
    with np.errstate(over="raise"):
        big = sigmoid(Tensor([50.0, -800.0])).data
    assert abs(big[0] - 1.0) < 1e-15
    assert big[1] >= 0.0
    np.testing.assert_allclose(sigmoid(Tensor([-np.log(3.0)])).data, [0.25], rtol=1e-12)


def test_sigmoid_gradients():
    rng = np.random.default_rng(9)
    assert grad_check(sigmoid, [rng.normal(0, 4, size=(5, 3))], rng) < 1e-6


def test_residual_block_zero_main_path_is_identity():
    block = ResidualBlock(2, 2, stride=1, dtype=np.float64)
    for cb in block.main:
        cb.conv.weight.data[:] = 0.0
    block.skip.weight.data[:] = np.eye(2).reshape(2, 2, 1, 1, 1)
    x = np.random.default_rng(10).normal(size=(1, 2, 4, 4, 4))
    np.testing.assert_allclose(residual_block(Tensor(x), block).data, x)


def test_residual_block_downsamples():
    block = ResidualBlock(3, 5, stride=2, rng=np.random.default_rng(0))
    out = block(Tensor(np.zeros((1, 3, 8, 8, 8), dtype=np.float32)))
    assert out.shape == (1, 5, 4, 4, 4)
    assert block.output_spatial((8, 8, 8)) == (4, 4, 4)


def test_residual_block_path_mismatch():
    block = ResidualBlock(2, 2, stride=2, rng=np.random.default_rng(0))
    block.skip.stride = (1, 1, 1)
    with pytest.raises(ConfigError):
        block(Tensor(np.zeros((1, 2, 4, 4, 4), dtype=np.float32)))


def test_residual_block_gradients():
    rng = np.random.default_rng(11)
    block = ResidualBlock(2, 3, stride=2, rng=rng, dtype=np.float64)
    for cb in block.main:
        cb.norm.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        cb.norm.beta.data[:] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    assert grad_check(block, [x], rng) < 1e-5

    # and with respect to the weights of every conv
    w = rng.normal(size=(1, 3, 2, 2, 2))
    xt = Tensor(x)
    grads = backward((block(xt) * Tensor(w)).sum())
    for p in [cb.conv.weight for cb in block.main] + [block.skip.weight]:
        original = p.data.copy()

        def f(t, p=p):
            p.data = t.data
            return (block(xt) * Tensor(w)).sum()

        numeric = finite_diff_gradient(f, original.copy(), h=1e-5)
        p.data = original
        assert relative_error(grads[p], numeric) < 1e-5


def test_conv_block_parameter_count():
    # conv 1->8 k3: 8*27 + 8, norm 8+8, prelu 8
    assert sum(p.size for p in ConvBlock(1, 8).parameters()) == 224 + 16 + 8
    assert sum(p.size for p in Conv3d(1, 8, 3).parameters()) == 224
