"""Numeric core: oracle equivalence for layers, gradient checks, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpdlab import tensorcore as tc
from dpdlab.errors import ConfigError, NonFiniteLossError, ShapeError


def conv2d_loops(x, kernel, bias, stride, pad):
    """Independent six-nested-loop convolution oracle."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = bias[co]
                for ci in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            acc += kernel[co, ci, a, b] * xp[ci, i * stride + a, j * stride + b]
                out[co, i, j] = acc
    return out


def make_conv(c_out, c_in, k, rng, name="w"):
    return tc.init_conv(name, c_out, c_in, k, rng)


class TestConv2d:
    def test_all_ones_center(self):
        x = tc.Tensor(np.ones((1, 3, 3)))
        kern = tc.Param.of("k", np.ones((1, 1, 3, 3)))
        bias = tc.Param.of("b", np.zeros(1))
        y = tc.conv2d(x, kern, bias, stride=1, pad=1)
        assert y.data[0, 1, 1] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = tc.Tensor(rng.standard_normal((1, 6, 6)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        y = tc.conv2d(x, tc.Param.of("k", k), tc.Param.of("b", np.zeros(1)), stride=1, pad=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_random_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = tc.Tensor(rng.standard_normal((2, 4, 4)))
        kern, bias = make_conv(3, 2, 3, rng)
        y = tc.conv2d(x, kern, bias, stride=1, pad=1)
        ref = conv2d_loops(x.data, kern.value.data, bias.value.data, 1, 1)
        assert np.max(np.abs(y.data - ref)) < 1e-12

    def test_exhaustive_small_sweep(self):
        # all shapes with H,W <= 8 and C <= 3, both window sizes and strides
        rng = np.random.default_rng(2)
        for h in range(1, 9):
            for w in range(1, 9):
                for c_in in (1, 2, 3):
                    for c_out in (1, 3):
                        for k, stride in ((1, 1), (3, 1), (3, 2)):
                            if h + (k - 1) < k or w + (k - 1) < k:
                                continue
                            pad = (k - 1) // 2
                            x = tc.Tensor(rng.standard_normal((c_in, h, w)))
                            kern, bias = make_conv(c_out, c_in, k, rng)
                            y = tc.conv2d(x, kern, bias, stride=stride, pad=pad)
                            ref = conv2d_loops(x.data, kern.value.data, bias.value.data,
                                               stride, pad)
                            assert y.shape == ref.shape
                            assert np.max(np.abs(y.data - ref)) < 1e-12

    def test_shape_error_names_axes(self):
        rng = np.random.default_rng(3)
        x = tc.Tensor(rng.standard_normal((2, 4, 4)))
        kern, bias = make_conv(1, 3, 3, rng)
        with pytest.raises(ShapeError, match="channel"):
            tc.conv2d(x, kern, bias, stride=1, pad=1)

    def test_even_kernel_rejected(self):
        x = tc.Tensor(np.zeros((1, 4, 4)))
        kern = tc.Param.of("k", np.zeros((1, 1, 2, 2)))
        with pytest.raises(ShapeError):
            tc.conv2d(x, kern, tc.Param.of("b", np.zeros(1)))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert tc.sigmoid(tc.Tensor([0.0])).data[0] == 0.5

    def test_relu_negative(self):
        assert tc.relu(tc.Tensor([-2.5])).data[0] == 0.0

    def test_sigmoid_range_extreme_inputs(self):
        y = tc.sigmoid(tc.Tensor([-1e4, -50.0, 0.0, 50.0, 1e4])).data
        assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))


class TestResampling:
    def test_bilinear_corners_and_interior(self):
        x = tc.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[None])
        y = tc.bilinear_upsample(x, 2).data[0]
        # closed-form oracle: f(r, c) = 2r + c on the unit square
        for i in range(4):
            for j in range(4):
                assert abs(y[i, j] - (2 * (i / 3) + (j / 3))) < 1e-12
        assert y[0, 0] == 0.0 and y[0, 3] == 1.0 and y[3, 0] == 2.0 and y[3, 3] == 3.0

    def test_factor_one_is_identity(self):
        rng = np.random.default_rng(4)
        x = tc.Tensor(rng.standard_normal((2, 5, 5)))
        np.testing.assert_array_equal(tc.bilinear_upsample(x, 1).data, x.data)

    def test_avgpool_block_means(self):
        x = tc.Tensor(np.arange(16, dtype=float).reshape(1, 4, 4))
        y = tc.avgpool2d(x, 2).data[0]
        ref = np.array([[2.5, 4.5], [10.5, 12.5]])
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_avgpool_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            tc.avgpool2d(tc.Tensor(np.zeros((1, 5, 5))), 2)


class TestGradCheck:
    def test_quadratic(self):
        p = tc.Param.of("w", [3.0])

        def f():
            p.grad.data[0] += 2.0 * p.value.data[0]
            return p.value.data[0] ** 2

        assert tc.grad_check(f, [p], eps=1e-5) < 1e-8

    def test_sigmoid_chain_quarter(self):
        p = tc.Param.of("w", [0.0])

        def f():
            y = tc.sigmoid(p.value)
            p.grad.data[0] += y.data[0] * (1 - y.data[0])
            return float(y.data[0])

        # analytic slope at zero is exactly 1/4
        assert tc.grad_check(f, [p], eps=1e-5) < 1e-8

    def test_eps_out_of_range(self):
        p = tc.Param.of("w", [1.0])
        with pytest.raises(ConfigError):
            tc.grad_check(lambda: 0.0, [p], eps=1e-3)

    def test_non_finite_loss_aborts(self):
        p = tc.Param.of("w", [1.0])
        with pytest.raises(NonFiniteLossError):
            tc.grad_check(lambda: float("nan"), [p])

    @pytest.mark.parametrize("seed", range(10))
    def test_layer_ops_pipeline(self, seed):
        # conv -> relu -> upsample -> avgpool -> sigmoid -> sum, randomized
        rng = np.random.default_rng(seed)
        x = tc.Tensor(rng.standard_normal((2, 4, 4)))
        kern, bias = make_conv(3, 2, 3, rng)

        def f():
            y, cc = tc.conv2d_fwd(x, kern, bias, stride=1, pad=1)
            a, mask = tc.relu_fwd(y)
            u, cu = tc.bilinear_upsample_fwd(a, 2)
            p, cp = tc.avgpool2d_fwd(u, 2)
            s, sy = tc.sigmoid_fwd(p)
            loss = float(s.data.sum())
            ds = np.ones_like(s.data)
            dp = tc.sigmoid_bwd(ds, sy)
            du = tc.avgpool2d_bwd(dp, cp)
            da = tc.bilinear_upsample_bwd(du, cu)
            dy = tc.relu_bwd(da, mask)
            tc.conv2d_bwd(dy, cc)
            return loss

        assert tc.grad_check(f, [kern, bias], n_coords=100, seed=seed) < 1e-4


class TestDeterminism:
    def test_bit_identical_across_runs(self):
        def run():
            rng = np.random.default_rng(11)
            x = tc.Tensor(rng.standard_normal((3, 8, 8)))
            kern, bias = make_conv(4, 3, 3, rng)
            y = tc.conv2d(x, kern, bias, stride=2, pad=1)
            return tc.sigmoid(tc.bilinear_upsample(y, 2)).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64))
@settings(max_examples=50, deadline=None)
def test_ops_preserve_finiteness(vals):
    n = len(vals)
    side = int(np.ceil(np.sqrt(n)))
    arr = np.zeros(side * side)
    arr[:n] = vals
    x = tc.Tensor(arr.reshape(1, side, side))
    for y in (tc.relu(x), tc.sigmoid(x), tc.bilinear_upsample(x, 2)):
        assert np.all(np.isfinite(y.data))


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        tc.tensor([1.0, float("inf")])


def test_param_shapes_match():
    p = tc.Param.of("p", np.zeros((2, 3)))
    assert p.grad.shape == p.value.shape
    p.grad.data += 1.0
    p.zero_grad()
    assert np.all(p.grad.data == 0.0)
