import math

import numpy as np
import pytest

from cspdet import tensor as T
from cspdet.errors import ConfigError, DimensionError
from cspdet.tensor import Tensor

from fdcheck import assert_grads_match, rand_tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestActivations:
    def test_mish_zero(self):
        assert T.mish(Tensor([0.0])).data[0] == 0.0

    def test_mish_minus_one(self):
        # direct evaluation of x*tanh(ln(1+e^x)) at x = -1
        expected = -1.0 * math.tanh(math.log(1.0 + math.exp(-1.0)))
        got = T.mish(Tensor([-1.0])).data[0]
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(-0.3034, abs=5e-5)

    def test_leaky_relu_negative(self):
        assert T.leaky_relu(Tensor([-2.0]), slope=0.1).data[0] == pytest.approx(-0.2)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.activation(Tensor([1.0]), "swish")

    @pytest.mark.parametrize("kind", ["mish", "leaky_relu", "relu", "sigmoid"])
    def test_gradients(self, rng, kind):
        for _ in range(5):
            x = rand_tensor(rng, (3, 7))
            assert_grads_match(lambda t: T.activation(t, kind).sum(), [x])

    def test_softplus_large_inputs_stable(self):
        x = Tensor([800.0, -800.0])
        out = T.softplus(x).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(800.0)
        assert out[1] == pytest.approx(0.0, abs=1e-12)


class TestElementwise:
    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))

    def test_fanout_gradients_add(self, rng):
        # y = f(x) + g(x): gradient equals the sum of the parts
        x = rand_tensor(rng, (4, 4))
        assert_grads_match(lambda t: (T.sigmoid(t).sum() + T.exp(t).sum()), [x])

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div, T.minimum, T.maximum])
    def test_binary_gradients(self, rng, op):
        a = rand_tensor(rng, (3, 5))
        b = rand_tensor(rng, (3, 5), lo=0.5, hi=1.5)
        assert_grads_match(lambda u, v: op(u, v).sum(), [a, b])

    def test_scalar_arith(self, rng):
        x = rand_tensor(rng, (2, 2))
        assert_grads_match(lambda t: ((2.5 * t + 1.0 - 0.5) / 2.0).sum(), [x])

    def test_take_accumulates_duplicates(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        out = T.take(x, np.array([1, 1, 4]))
        out.sum().backward()
        assert x.grad.tolist() == [0.0, 2.0, 0.0, 0.0, 1.0, 0.0]


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_paper_stem_shape(self):
        # 12-channel 208x208 map through 32 1x1 kernels keeps 208x208
        x = Tensor(np.zeros((1, 12, 208, 208)))
        w = Tensor(np.zeros((32, 12, 1, 1)))
        assert T.conv2d(x, w).shape == (1, 32, 208, 208)

    def test_dilated_extent(self):
        x = Tensor(np.zeros((1, 2, 6, 6)))
        w = Tensor(np.zeros((1, 2, 3, 3)))
        out = T.conv2d(x, w, padding=3, dilation=3)
        # floor((6 + 6 - 7)/1) + 1 = 6
        assert out.shape == (1, 1, 6, 6)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_nonpositive_output(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_extent_sweep_matches_formula(self):
        for h in range(1, 17):
            for f in (1, 3, 5):
                for s in (1, 2):
                    for p in range(4):
                        for dil in (1, 2):
                            f_eff = dil * (f - 1) + 1
                            want = (h + 2 * p - f_eff) // s + 1
                            assert T.conv_out_extent(h, f, s, p, dil) == want
                            if want >= 1:
                                x = Tensor(np.zeros((1, 1, h, h)))
                                w = Tensor(np.zeros((1, 1, f, f)))
                                out = T.conv2d(x, w, stride=s, padding=p, dilation=dil)
                                assert out.shape[2] == want

    def test_gradients_dilated(self, rng):
        x = rand_tensor(rng, (1, 2, 6, 6))
        w = rand_tensor(rng, (2, 2, 3, 3))
        b = rand_tensor(rng, (2,))
        assert_grads_match(
            lambda xx, ww, bb: T.conv2d(xx, ww, bb, stride=1, padding=3, dilation=3).sum(),
            [x, w, b])

    def test_gradients_strided(self, rng):
        x = rand_tensor(rng, (2, 3, 5, 5))
        w = rand_tensor(rng, (2, 3, 3, 3))
        assert_grads_match(
            lambda xx, ww: T.conv2d(xx, ww, stride=2, padding=1).sum(), [x, w])


class TestPoolingResizing:
    def test_maxpool_full_window(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 13, 13)))
        out = T.maxpool2d(x, kernel=13, stride=13, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == x.data.max()

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out = T.maxpool2d(x, kernel=2)
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_maxpool_gradients(self, rng):
        x = rand_tensor(rng, (2, 2, 6, 6), lo=-2.0, hi=2.0)
        assert_grads_match(lambda t: T.maxpool2d(t, 3, 2, 1).sum(), [x])

    def test_global_avgpool_ones(self):
        out = T.global_avgpool(Tensor(np.ones((1, 4, 7, 7))))
        assert out.shape == (1, 4, 1, 1)
        np.testing.assert_array_equal(out.data, np.ones((1, 4, 1, 1)))

    def test_global_avgpool_gradients(self, rng):
        x = rand_tensor(rng, (2, 3, 4, 4))
        assert_grads_match(lambda t: T.sigmoid(T.global_avgpool(t)).sum(), [x])

    def test_resize_nearest_doubling(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = T.resize_nearest(x, 4, 4)
        np.testing.assert_array_equal(out.data[0, 0, 0], [0, 0, 1, 1])
        np.testing.assert_array_equal(out.data[0, 0, 3], [2, 2, 3, 3])

    def test_resize_invalid_target(self):
        with pytest.raises(ConfigError):
            T.resize_nearest(Tensor(np.zeros((1, 1, 2, 2))), 0, 2)

    def test_resize_gradients(self, rng):
        x = rand_tensor(rng, (1, 2, 3, 3))
        assert_grads_match(lambda t: T.sigmoid(T.resize_nearest(t, 5, 7)).sum(), [x])


class TestConcatSlice:
    def test_concat_channels(self):
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 5, 3, 3)))
        assert T.concat([a, b]).shape == (1, 7, 3, 3)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3)))])

    def test_concat_slice_roundtrip_bitexact(self, rng):
        parts = [Tensor(rng.normal(size=(1, c, 4, 4))) for c in (1, 3, 2)]
        merged = T.concat(parts).data
        offs = [0, 1, 4, 6]
        for t, lo, hi in zip(parts, offs[:-1], offs[1:]):
            np.testing.assert_array_equal(merged[:, lo:hi], t.data)

    def test_concat_gradients(self, rng):
        a = rand_tensor(rng, (1, 2, 3, 3))
        b = rand_tensor(rng, (1, 3, 3, 3))
        assert_grads_match(lambda u, v: T.sigmoid(T.concat([u, v])).sum(), [a, b])

    def test_stride2_slice_offsets(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert T.stride2_slice(x, 0, 0).data[0, 0, 0, 0] == 1.0
        assert T.stride2_slice(x, 1, 0).data[0, 0, 0, 0] == 3.0
        assert T.stride2_slice(x, 0, 1).data[0, 0, 0, 0] == 2.0
        assert T.stride2_slice(x, 1, 1).data[0, 0, 0, 0] == 4.0
        with pytest.raises(ConfigError):
            T.stride2_slice(x, 2, 0)

    def test_stride2_slice_gradients(self, rng):
        x = rand_tensor(rng, (1, 1, 4, 6))
        assert_grads_match(lambda t: T.sigmoid(T.stride2_slice(t, 1, 0)).sum(), [x])


class TestBatchNorm:
    def _buffers(self, c):
        return np.zeros(c), np.ones(c)

    def test_constant_channel_is_zeroed(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
        rm, rv = self._buffers(3)
        out = T.batchnorm2d(x, g, b, rm, rv, training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_affine_stage(self, rng):
        # standardized data in: output is approximately 2x + 3
        x = rng.normal(size=(4, 2, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batchnorm2d(Tensor(x), Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)),
                            *self._buffers(2), training=True)
        np.testing.assert_allclose(out.data, 2.0 * x + 3.0, atol=1e-4)

    def test_running_stats_update(self):
        x = Tensor(np.full((1, 1, 2, 2), 10.0))
        rm, rv = self._buffers(1)
        T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv,
                      training=True, momentum=0.03)
        assert rm[0] == pytest.approx(0.97 * 0.0 + 0.03 * 10.0)
        assert rv[0] == pytest.approx(0.97 * 1.0 + 0.03 * 0.0)

    def test_zero_elements_rejected(self):
        with pytest.raises(ConfigError):
            T.batchnorm2d(Tensor(np.zeros((0, 2, 4, 4))), Tensor(np.ones(2)),
                          Tensor(np.zeros(2)), *self._buffers(2), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = rand_tensor(rng, (2, 3, 4, 4))
        g = rand_tensor(rng, (3,), lo=0.5, hi=1.5)
        b = rand_tensor(rng, (3,))
        rm = rng.normal(size=3)
        rv = rng.uniform(0.5, 1.5, size=3)

        def fn(xx, gg, bb):
            return T.sigmoid(T.batchnorm2d(xx, gg, bb, rm.copy(), rv.copy(),
                                           training=training)).sum()

        assert_grads_match(fn, [x, g, b])


class TestTape:
    def test_backward_visits_fanout_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.mul(x, x)        # x reused: grad accumulates 2x twice? no - product rule
        y.backward()
        assert x.grad[0] == pytest.approx(4.0)

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.sigmoid(x)
        assert not y.requires_grad and y._parents == ()

    def test_finite_outputs_after_forward_backward(self, rng):
        x = rand_tensor(rng, (2, 3, 8, 8))
        w = rand_tensor(rng, (4, 3, 3, 3))
        out = T.mish(T.conv2d(x, w, stride=2, padding=1))
        loss = out.mean()
        loss.backward()
        assert np.isfinite(out.data).all()
        assert np.isfinite(x.grad).all() and np.isfinite(w.grad).all()
