import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksynth import ConfigError, DimensionError, GradTape, Param, Tensor5, UsageError
from ksynth import ops
from util import fd_check, rel_err


def t5(arr, tracked=False):
    return Tensor5(np.asarray(arr, dtype=float), tracked)


def ones_kernel(c_in, c_out, kt, kh, kw):
    return Param(np.ones((c_out, c_in, kt, kh, kw)))


class TestTensor5:
    def test_flat_layout_roundtrip(self, rng):
        x = rng.normal(size=(2, 3, 4, 5, 6))
        t = Tensor5(x)
        n_, c_, t_, h_, w_ = 1, 2, 3, 4, 5
        off = ((((n_ * 3 + c_) * 4 + t_) * 5 + h_) * 6 + w_)
        assert t.flat[off] == x[n_, c_, t_, h_, w_]
        assert t.flat.size == 2 * 3 * 4 * 5 * 6

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            Tensor5(np.zeros((2, 3, 4)))


class TestConvSpatial:
    def test_ones_kernel_edge_counts(self):
        # constant-1 input, 3x3 all-ones kernel: interior 9, corner 4
        x = t5(np.ones((1, 1, 1, 5, 5)))
        k = ops.SpatialKernel(3, weights=ones_kernel(1, 1, 1, 3, 3))
        y = ops.conv_spatial(x, k)
        assert y.data[0, 0, 0, 2, 2] == 9.0
        assert y.data[0, 0, 0, 0, 0] == 4.0
        assert y.data[0, 0, 0, 0, 2] == 6.0

    def test_identity_1x1(self, rng):
        x = t5(rng.normal(size=(2, 3, 4, 5, 5)))
        w = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        y = ops.conv_spatial(x, ops.SpatialKernel(1, weights=Param(w)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_dilated_impulse_support(self):
        # 3x3 kernel, dilation 2: support spans 5x5 with the interior ring zero
        x = np.zeros((1, 1, 1, 9, 9))
        x[0, 0, 0, 4, 4] = 1.0
        k = ops.SpatialKernel(3, dilation=2, weights=ones_kernel(1, 1, 1, 3, 3))
        y = ops.conv_spatial(t5(x), k).data[0, 0, 0]
        nz = np.argwhere(y != 0)
        assert nz[:, 0].min() == 2 and nz[:, 0].max() == 6
        assert nz[:, 1].min() == 2 and nz[:, 1].max() == 6
        # ring at distance 1 from the centre is zero
        assert y[3, 4] == 0 and y[4, 3] == 0 and y[3, 3] == 0
        assert y[4, 4] != 0 and y[2, 2] != 0

    def test_temporal_extent_one(self, rng):
        # each output frame depends only on the same input frame
        x = rng.normal(size=(1, 2, 4, 6, 6))
        x2 = x.copy()
        x2[:, :, 2] += rng.normal(size=(1, 2, 6, 6))
        rngk = np.random.default_rng(7)
        k = ops.SpatialKernel.create(2, 2, 3, rngk)
        y1 = ops.conv_spatial(t5(x), k).data
        y2 = ops.conv_spatial(t5(x2), k).data
        changed = np.abs(y1 - y2) > 0
        assert changed[:, :, 2].any()
        assert not changed[:, :, [0, 1, 3]].any()

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ops.SpatialKernel(4)

    def test_group_mismatch_rejected(self, rng):
        x = t5(rng.normal(size=(1, 3, 2, 4, 4)))
        k = ops.SpatialKernel.create(4, 4, 3, rng, groups=2)
        with pytest.raises(DimensionError):
            ops.conv_spatial(x, k)

    def test_fast_path_matches_naive(self, rng):
        x = t5(rng.normal(size=(2, 4, 3, 5, 5)))
        for groups, dil in [(1, 1), (2, 1), (1, 2), (4, 1)]:
            k = ops.SpatialKernel.create(4, 4, 3, rng, dilation=dil, groups=groups)
            fast = ops.conv_spatial(x, k, method="fast").data
            slow = ops.conv_spatial(x, k, method="naive").data
            assert rel_err(fast, slow) < 1e-12


class TestConvTemporal:
    def test_ones_kernel_edge_counts(self):
        x = t5(np.ones((1, 1, 8, 1, 1)))
        k = ops.TemporalKernel(3, weights=ones_kernel(1, 1, 3, 1, 1))
        y = ops.conv_temporal(x, k).data[0, 0, :, 0, 0]
        assert y[3] == 3.0
        assert y[0] == 2.0 and y[7] == 2.0

    def test_identity_k1(self, rng):
        x = t5(rng.normal(size=(2, 2, 5, 3, 3)))
        w = np.zeros((2, 2, 1, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        y = ops.conv_temporal(x, ops.TemporalKernel(1, weights=Param(w)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_impulse_support(self):
        x = np.zeros((1, 1, 9, 1, 1))
        x[0, 0, 4] = 1.0
        k = ops.TemporalKernel(5, weights=ones_kernel(1, 1, 5, 1, 1))
        y = ops.conv_temporal(t5(x), k).data[0, 0, :, 0, 0]
        assert set(np.flatnonzero(y)) == {2, 3, 4, 5, 6}

    def test_fast_path_matches_naive(self, rng):
        x = t5(rng.normal(size=(2, 4, 6, 3, 3)))
        k = ops.TemporalKernel.create(4, 4, 5, rng, groups=2)
        assert rel_err(ops.conv_temporal(x, k).data,
                       ops.conv_temporal(x, k, method="naive").data) < 1e-12


class TestConvLinearity:
    def test_linear_combination(self, rng):
        a, b = 1.7, -0.6
        x = rng.normal(size=(1, 2, 4, 5, 5))
        y = rng.normal(size=(1, 2, 4, 5, 5))
        k = ops.SpatialKernel.create(2, 2, 3, rng)
        lhs = ops.conv_spatial(t5(a * x + b * y), k).data
        rhs = a * ops.conv_spatial(t5(x), k).data + b * ops.conv_spatial(t5(y), k).data
        assert rel_err(lhs, rhs) < 1e-10

    def test_impulse_support_equals_receptive_field(self, rng):
        for size, dil in [(1, 1), (3, 1), (3, 2), (5, 1)]:
            rf = dil * (size - 1) + 1
            x = np.zeros((1, 1, 1, 13, 13))
            x[0, 0, 0, 6, 6] = 1.0
            w = Param(np.full((1, 1, 1, size, size), 0.5))
            y = ops.conv_spatial(t5(x), ops.SpatialKernel(size, dilation=dil, weights=w))
            nz = np.argwhere(y.data[0, 0, 0] != 0)
            span_h = nz[:, 0].max() - nz[:, 0].min() + 1
            span_w = nz[:, 1].max() - nz[:, 1].min() + 1
            assert span_h == rf and span_w == rf


class TestMaxPool:
    def test_spike_propagation(self):
        x = np.zeros((1, 1, 7, 7, 7))
        x[0, 0, 3, 3, 3] = 5.0
        y = ops.maxpool3d(t5(x), (3, 3, 3)).data[0, 0]
        inside = y[2:5, 2:5, 2:5]
        assert (inside == 5.0).all()
        y[2:5, 2:5, 2:5] = 0.0
        assert (y == 0.0).all()

    def test_window_one_is_identity(self, rng):
        x = rng.normal(size=(2, 2, 3, 4, 4))
        y = ops.maxpool3d(t5(x), (1, 1, 1)).data
        np.testing.assert_array_equal(y, x)

    def test_output_dominates_input(self, rng):
        x = rng.normal(size=(2, 3, 4, 5, 5))
        y = ops.maxpool3d(t5(x), (3, 3, 3)).data
        assert (y >= x).all()

    def test_even_window_rejected(self, rng):
        with pytest.raises(ConfigError):
            ops.maxpool3d(t5(np.zeros((1, 1, 2, 2, 2))), (2, 3, 3))


class TestGlobalAvgPool:
    def test_constant(self):
        x = t5(np.full((2, 3, 2, 4, 4), 7.0))
        np.testing.assert_allclose(ops.global_avg_pool(x).data, 7.0)

    def test_arithmetic_mean(self):
        k = 8
        x = np.arange(k, dtype=float).reshape(1, 1, k, 1, 1)
        assert ops.global_avg_pool(t5(x)).data[0, 0] == (k - 1) / 2

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 3, 4, 5))
        got = ops.global_avg_pool(t5(x)).data
        want = np.zeros((2, 3))
        for n in range(2):
            for c in range(3):
                acc = 0.0
                for t_ in range(3):
                    for h in range(4):
                        for w in range(5):
                            acc += x[n, c, t_, h, w]
                want[n, c] = acc / (3 * 4 * 5)
        assert rel_err(got, want) < 1e-12


class TestElementwise:
    def test_relu_zeroes_negatives(self, rng):
        x = rng.normal(size=(1, 2, 2, 3, 3))
        y = ops.relu(t5(-np.abs(x))).data
        assert (y == 0).all()

    def test_split_concat_roundtrip_bitexact(self, rng):
        x = rng.normal(size=(2, 8, 3, 4, 4))
        a, b = ops.split_channels(t5(x), 0.25)
        back = ops.concat_channels([a, b])
        assert (back.data == x).all()

    def test_channelwise_mul_ones_identity(self, rng):
        x = rng.normal(size=(2, 4, 2, 3, 3))
        y = ops.channelwise_mul(t5(x), ops.as_tracked(np.ones(4)))
        np.testing.assert_array_equal(y.data, x)

    def test_add_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ops.add(t5(np.zeros((1, 2, 2, 2, 2))), t5(np.zeros((1, 3, 2, 2, 2))))

    def test_non_integral_split_rejected(self, rng):
        with pytest.raises(ConfigError):
            ops.split_channels(t5(np.zeros((1, 5, 2, 2, 2))), 0.5)

    @settings(max_examples=25, deadline=None)
    @given(c=st.integers(2, 12), frac=st.integers(1, 11))
    def test_split_concat_roundtrip_property(self, c, frac):
        if frac >= c:
            return
        r = np.random.default_rng(c * 13 + frac)
        x = r.normal(size=(1, c, 2, 3, 3))
        a, b = ops.split_channels(t5(x), frac / c)
        assert (ops.concat_channels([a, b]).data == x).all()


class TestBatchNorm:
    def test_train_normalises(self, rng):
        bn = ops.BatchNorm(3)
        x = t5(rng.normal(2.0, 3.0, size=(4, 3, 5, 6, 6)))
        y = bn(x, train=True).data
        assert np.abs(y.mean(axis=(0, 2, 3, 4))).max() < 1e-6
        assert np.abs(y.var(axis=(0, 2, 3, 4)) - 1).max() < 1e-4

    def test_constant_input_gives_beta(self):
        bn = ops.BatchNorm(2)
        bn.beta.data[:] = [1.5, -2.0]
        x = t5(np.full((2, 2, 3, 4, 4), 5.0))
        y = bn(x, train=True).data
        np.testing.assert_allclose(y[:, 0], 1.5)
        np.testing.assert_allclose(y[:, 1], -2.0)

    def test_eval_matches_train_when_stats_agree(self, rng):
        bn = ops.BatchNorm(3)
        x = rng.normal(size=(4, 3, 5, 6, 6))
        y_train = bn(t5(x), train=True).data
        bn.running_mean = x.mean(axis=(0, 2, 3, 4))
        bn.running_var = x.var(axis=(0, 2, 3, 4))
        y_eval = bn(t5(x), train=False).data
        assert np.abs(y_train - y_eval).max() < 1e-6


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t5(rng.normal(size=(1, 2, 2, 3, 3)), tracked=True)
        with GradTape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x), 1.0)

    def test_dead_relu_grad_zero(self, rng):
        x = t5(-np.abs(rng.normal(size=(1, 2, 2, 3, 3))) - 0.1, tracked=True)
        with GradTape() as tape:
            loss = sum_all(ops.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(x), 0.0)

    def test_untouched_tensor_gets_zero_grad(self, rng):
        x = t5(rng.normal(size=(1, 1, 2, 2, 2)), tracked=True)
        y = t5(rng.normal(size=(1, 1, 2, 2, 2)), tracked=True)
        with GradTape() as tape:
            loss = sum_all(ops.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(y), 0.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = t5(rng.normal(size=(1, 1, 2, 2, 2)), tracked=True)
        with GradTape() as tape:
            y = ops.relu(x)
        with pytest.raises(UsageError):
            tape.backward(y)


def sum_all(x):
    """Scalar sum of a tracked value, as a tape op (test helper)."""
    import numpy as _np
    from ksynth.tensor import result_of, Tracked as _Tracked

    out = _np.asarray(x.data.sum())

    def bwd(g):
        return (_np.broadcast_to(g, x.data.shape).copy(),)

    return result_of(out, (x,), bwd, cls=_Tracked)


class TestFiniteDifferences:
    """Analytic gradients vs central differences for every differentiable op."""

    def _probe(self, make_loss, leaves, rng, n=20):
        fd_check(make_loss, leaves, n_probes=n, rng=rng)

    def test_conv_spatial(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(2, 4, 3, 5, 5)), True)
        k = ops.SpatialKernel.create(4, 4, 3, rng, dilation=1, groups=2)

        def loss(leaves):
            xx, ww = leaves
            kk = ops.SpatialKernel(3, groups=2, weights=ww)
            return sum_all(ops.relu(ops.conv_spatial(xx, kk)))

        self._probe(loss, [x, k.weights], rng)

    def test_conv_temporal_dilated(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(2, 2, 7, 3, 3)), True)
        k = ops.TemporalKernel.create(2, 2, 3, rng, dilation=2)

        def loss(leaves):
            xx, ww = leaves
            kk = ops.TemporalKernel(3, dilation=2, weights=ww)
            return sum_all(ops.relu(ops.conv_temporal(xx, kk)))

        self._probe(loss, [x, k.weights], rng)

    def test_maxpool(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(1, 2, 4, 4, 4)), True)

        def loss(leaves):
            (xx,) = leaves
            sq = ops.maxpool3d(xx, (3, 3, 3))
            return sum_all(ops.channelwise_mul(sq, ops.as_tracked([1.0, 2.0])))

        self._probe(loss, [x], rng)

    def test_global_avg_pool_and_linear(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(2, 3, 2, 3, 3)), True)
        w = Param(rng.normal(size=(4, 3)))
        b = Param(rng.normal(size=4))

        def loss(leaves):
            xx, ww, bb = leaves
            feats = ops.global_avg_pool(xx)
            return sum_all(ops.relu(ops.linear(feats, ww, bb)))

        self._probe(loss, [x, w, b], rng)

    def test_batchnorm_train(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(3, 2, 2, 3, 3)), True)
        bn = ops.BatchNorm(2)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 2)
        bn.beta.data[:] = rng.uniform(-0.5, 0.5, 2)

        def loss(leaves):
            xx, gg, bb = leaves
            bn2 = ops.BatchNorm(2)
            bn2.gamma, bn2.beta = gg, bb
            y = bn2(xx, train=True)
            return sum_all(ops.relu(y))

        self._probe(loss, [x, bn.gamma, bn.beta], rng)

    def test_concat_split_add(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(1, 4, 2, 3, 3)), True)
        y = Tensor5(rng.uniform(-1, 1, size=(1, 4, 2, 3, 3)), True)

        def loss(leaves):
            xx, yy = leaves
            a, b = ops.split_channels(xx, 0.5)
            cat = ops.concat_channels([b, a])
            return sum_all(ops.relu(ops.add(cat, yy)))

        self._probe(loss, [x, y], rng)

    def test_channelwise_mul_both_sides(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(2, 3, 2, 3, 3)), True)
        w = Param(rng.uniform(0.5, 1.5, size=3))

        def loss(leaves):
            xx, ww = leaves
            return sum_all(ops.relu(ops.channelwise_mul(xx, ww)))

        self._probe(loss, [x, w], rng)

    def test_dropout_fixed_mask(self, rng):
        x = Tensor5(rng.uniform(0.5, 1.5, size=(2, 3, 2, 3, 3)), True)

        def loss(leaves):
            (xx,) = leaves
            r = np.random.default_rng(99)  # frozen mask per evaluation
            return sum_all(ops.dropout(xx, 0.3, r, train=True))

        self._probe(loss, [x], rng)

    def test_avgpool_hw2(self, rng):
        x = Tensor5(rng.uniform(-1, 1, size=(1, 2, 2, 4, 4)), True)

        def loss(leaves):
            (xx,) = leaves
            return sum_all(ops.relu(ops.avgpool_hw2(xx)))

        self._probe(loss, [x], rng)


class TestFiniteness:
    def test_pipeline_outputs_finite(self, rng):
        x = t5(rng.normal(size=(2, 4, 4, 8, 8)))
        k = ops.SpatialKernel.create(4, 4, 3, rng)
        bn = ops.BatchNorm(4)
        y = bn(ops.conv_spatial(x, k), train=True)
        y = ops.relu(y)
        y = ops.maxpool3d(y, (3, 3, 3))
        assert np.isfinite(y.data).all()
