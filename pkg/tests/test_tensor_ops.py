import numpy as np
import pytest

import mifc.tensor as T
from mifc.errors import InvalidArgumentError, InvalidStateError
from mifc.prng import SplitMix64
from oracles import conv2d_naive, depthwise_naive, maxpool_naive


def t64(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def rand64(rng, shape, grad=False, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=grad)


class TestConv2d:
    def test_one_by_one_identity(self):
        x = t64(np.arange(12).reshape(1, 1, 3, 4))
        w = t64([[[[1.0]]]])
        b = t64([0.0])
        y = T.conv2d(x, w, b)
        assert np.array_equal(y.data, x.data)

    def test_hand_case_against_oracle(self):
        x = np.array([[[[1.0, 2, 3], [4, 5, 6], [7, 8, 9]]]])
        w = np.array([[[[1.0, 0], [0, 1]]]])
        got = T.conv2d(t64(x), t64(w), t64([0.0])).data
        ref = conv2d_naive(x, w, None, 1, 0)
        assert np.array_equal(got, ref)
        assert np.array_equal(got[0, 0], [[6, 8], [12, 14]])

    def test_zero_kernel_outputs_bias(self):
        rng = np.random.default_rng(0)
        x = rand64(rng, (2, 3, 5, 5))
        w = t64(np.zeros((4, 3, 3, 3)))
        b = t64([1.0, -2.0, 0.5, 3.0])
        y = T.conv2d(x, w, b, stride=1, pad=1)
        for o in range(4):
            assert np.all(y.data[:, o] == b.data[o])

    def test_channel_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            T.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((3, 5, 3, 3))), None)

    def test_empty_output_rejected(self):
        with pytest.raises(InvalidArgumentError):
            T.conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))), None)


class TestDepthwise:
    def test_per_channel_independence(self):
        x = t64(np.ones((1, 2, 2, 2)))
        w = t64(np.ones((2, 1, 2, 2)))
        y = T.depthwise_conv2d(x, w, None)
        assert y.data.shape == (1, 2, 1, 1)
        assert np.all(y.data == 4.0)

    def test_identity_kernels(self):
        rng = np.random.default_rng(1)
        x = rand64(rng, (2, 3, 4, 4))
        w = t64(np.ones((3, 1, 1, 1)))
        assert np.array_equal(T.depthwise_conv2d(x, w, None).data, x.data)

    def test_zeroed_channel_blocks_only_that_channel(self):
        x = t64(np.ones((1, 2, 3, 3)))
        w = np.zeros((2, 1, 1, 1))
        w[1, 0, 0, 0] = 1.0
        y = T.depthwise_conv2d(x, t64(w), None)
        assert np.all(y.data[0, 0] == 0) and np.all(y.data[0, 1] == 1)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 7, 7))
        w = rng.standard_normal((4, 1, 3, 3))
        got = T.depthwise_conv2d(t64(x), t64(w), None, stride=2, pad=1).data
        assert np.allclose(got, depthwise_naive(x, w, None, 2, 1), atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            T.depthwise_conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((2, 1, 3, 3))), None)


class TestDense:
    def test_identity_plus_shift(self):
        y = T.dense(t64([[1.0, 2.0]]), t64(np.eye(2)), t64([1.0, 1.0]))
        assert np.array_equal(y.data, [[2.0, 3.0]])

    def test_hand_matrix_multiply(self):
        y = T.dense(t64([[1.0, 2.0]]), t64([[1.0, 2], [3, 4]]), t64([0.0, 0]))
        assert np.array_equal(y.data, [[7.0, 10.0]])

    def test_zero_weights(self):
        y = T.dense(t64([[1.0, 2.0]]), t64(np.zeros((2, 3))), t64(np.zeros(3)))
        assert np.all(y.data == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            T.dense(t64([[1.0, 2.0]]), t64(np.zeros((3, 2))), t64(np.zeros(2)))


class TestBatchnorm:
    def test_two_values_normalize_to_plus_minus_one(self):
        x = t64(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        y = T.batchnorm(x, t64([1.0]), t64([0.0]), np.zeros(1), np.ones(1), "train", eps=1e-12)
        assert np.allclose(y.data.reshape(-1), [-1.0, 1.0], atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(3)
        x = rand64(rng, (2, 3, 4, 4))
        y = T.batchnorm(x, t64(np.zeros(3)), t64([1.0, 2, 3]), np.zeros(3), np.ones(3), "train")
        for c in range(3):
            assert np.allclose(y.data[:, c], c + 1.0)

    def test_eval_identity_normalization(self):
        rng = np.random.default_rng(4)
        x = rand64(rng, (2, 3, 4, 4))
        y = T.batchnorm(x, t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3),
                        "eval", eps=1e-12)
        assert np.allclose(y.data, x.data, atol=1e-6)

    def test_running_stats_update_rule(self):
        rng = np.random.default_rng(5)
        x = rand64(rng, (4, 2, 3, 3))
        rm, rv = np.full(2, 10.0), np.full(2, 4.0)
        T.batchnorm(x, t64(np.ones(2)), t64(np.zeros(2)), rm, rv, "train", momentum=0.75)
        bm = x.data.mean(axis=(0, 2, 3))
        bv = x.data.var(axis=(0, 2, 3))
        assert np.allclose(rm, 0.75 * 10.0 + 0.25 * bm, atol=1e-12)
        assert np.allclose(rv, 0.75 * 4.0 + 0.25 * bv, atol=1e-12)

    def test_single_element_per_channel_rejected(self):
        x = t64(np.zeros((1, 3, 1, 1)))
        with pytest.raises(InvalidArgumentError):
            T.batchnorm(x, t64(np.ones(3)), t64(np.zeros(3)), np.zeros(3), np.ones(3), "train")


class TestActivation:
    def test_relu6_clamps(self):
        y = T.activation(t64([[7.0, -1.0, 3.0]]), "relu6")
        assert np.array_equal(y.data, [[6.0, 0.0, 3.0]])

    def test_relu(self):
        assert np.array_equal(T.activation(t64([-1.0, 2.0]), "relu").data, [0.0, 2.0])

    def test_linear_identity(self):
        x = t64([-5.0, 9.0])
        assert np.array_equal(T.activation(x, "linear").data, x.data)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            T.activation(t64([1.0]), "gelu")


class TestMaxpoolAndGap:
    def test_window_max(self):
        y = T.maxpool2d(t64([[[[1.0, 2], [3, 4]]]]), 2, 2)
        assert y.data.reshape(-1)[0] == 4.0

    def test_constant_image(self):
        y = T.maxpool2d(t64(np.full((1, 1, 4, 4), 2.5)), 2, 2)
        assert np.all(y.data == 2.5)

    def test_ramp_matches_oracle(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        got = T.maxpool2d(t64(x), 2, 2).data
        assert np.array_equal(got, maxpool_naive(x, 2, 2))

    def test_window_too_large(self):
        with pytest.raises(InvalidArgumentError):
            T.maxpool2d(t64(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_gap_constant_plane(self):
        assert np.all(T.global_avg_pool(t64(np.full((1, 2, 3, 3), 5.0))).data == 5.0)

    def test_gap_mean(self):
        y = T.global_avg_pool(t64([[[[0.0, 2], [4, 6]]]]))
        assert y.data.reshape(-1)[0] == 3.0

    def test_gap_gradient_is_inverse_area(self):
        x = t64(np.random.default_rng(6).standard_normal((1, 2, 3, 4)), grad=True)
        loss = T.tensor_sum(T.global_avg_pool(x))
        T.backward(loss)
        assert np.allclose(x.grad, 1.0 / 12.0)


class TestConcat:
    def test_concat_order(self):
        y = T.concat_features(t64([[1.0, 2.0]]), t64([[3.0]]))
        assert np.array_equal(y.data, [[1.0, 2.0, 3.0]])

    def test_empty_second_input(self):
        a = t64([[1.0, 2.0]])
        y = T.concat_features(a, t64(np.zeros((1, 0))))
        assert np.array_equal(y.data, a.data)

    def test_gradients_split(self):
        a = t64([[1.0, 2.0]], grad=True)
        b = t64([[3.0]], grad=True)
        loss = T.tensor_sum(T.mul(T.concat_features(a, b), T.concat_features(a, b)))
        T.backward(loss)
        assert np.allclose(a.grad, 2 * a.data) and np.allclose(b.grad, 2 * b.data)

    def test_batch_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            T.concat_features(t64(np.zeros((2, 3))), t64(np.zeros((3, 3))))


class TestSoftmaxCrossEntropy:
    def test_symmetric_logits(self):
        logits = t64([[0.0, 0.0]], grad=True)
        loss, probs = T.softmax_cross_entropy(logits, [0])
        assert abs(loss.item() - np.log(2.0)) < 1e-12
        assert np.allclose(probs.data, [[0.5, 0.5]])
        T.backward(loss)
        assert np.allclose(logits.grad, [[-0.5, 0.5]])

    def test_confident_correct(self):
        loss, _ = T.softmax_cross_entropy(t64([[10.0, -10.0]]), [0])
        assert abs(loss.item() - np.log1p(np.exp(-20.0))) < 1e-15

    def test_confident_wrong(self):
        loss, _ = T.softmax_cross_entropy(t64([[10.0, -10.0]]), [1])
        assert abs(loss.item() - (20.0 + np.log1p(np.exp(-20.0)))) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        logits = t64(rng.standard_normal((20, 2)) * 50)
        _, probs = T.softmax_cross_entropy(logits, rng.integers(0, 2, 20))
        assert np.all(probs.data >= 0)
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() <= 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            T.softmax_cross_entropy(t64([[0.0, 0.0]]), [2])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t64(np.random.default_rng(8).standard_normal((3, 4)), grad=True)
        T.backward(T.tensor_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_half_sum_of_squares(self):
        x = t64(np.random.default_rng(9).standard_normal(10), grad=True)
        T.backward(T.mul(T.tensor_sum(T.mul(x, x)), 0.5))
        assert np.allclose(x.grad, x.data, atol=1e-12)

    def test_double_backward_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        loss = T.tensor_sum(x)
        T.backward(loss)
        with pytest.raises(InvalidStateError):
            T.backward(loss)

    def test_unused_parameter_gets_zero(self):
        x = t64([1.0], grad=True)
        unused = t64([5.0], grad=True)
        T.backward(T.tensor_sum(x))
        assert unused.grad is None
        assert np.array_equal(unused.grad_or_zeros(), [0.0])

    def test_gradients_accumulate_on_reuse(self):
        x = t64([2.0], grad=True)
        T.backward(T.tensor_sum(T.add(x, x)))
        assert np.array_equal(x.grad, [2.0])

    def test_row_major_flat_indexing(self):
        rng = np.random.default_rng(10)
        t = t64(rng.standard_normal((2, 3, 4, 5)))
        flat = t.data.reshape(-1)
        n_, c_, h_, w_ = t.data.shape
        for _ in range(20):
            n, c, h, w = (rng.integers(0, d) for d in (n_, c_, h_, w_))
            assert t.data[n, c, h, w] == flat[((n * c_ + c) * h_ + h) * w_ + w]


def _away_from_kinks(rng, shape, kinks=(0.0, 6.0), margin=0.05):
    x = rng.standard_normal(shape) * 2.0 + 1.0
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] += 3 * margin
    return x


class TestGradientCheck:
    """Every differentiable op, >= 3 random small shapes, 64-bit, <= 1e-4."""

    def test_conv2d(self):
        rng = np.random.default_rng(20)
        for shape, stride, pad in (((2, 3, 6, 6), 1, 1), ((1, 2, 7, 5), 2, 0), ((2, 1, 5, 5), 2, 1)):
            x = rand64(rng, shape, grad=True)
            w = rand64(rng, (4, shape[1], 3, 3), grad=True, scale=0.4)
            b = rand64(rng, (4,), grad=True, scale=0.1)
            y0 = T.conv2d(x, w, b, stride, pad)
            gy = rng.standard_normal(y0.data.shape)

            def loss():
                return T.tensor_sum(T.mul(T.conv2d(x, w, b, stride, pad), T.Tensor(gy)))

            assert T.gradient_check(loss, [x, w, b], eps=1e-3) <= 1e-4

    def test_depthwise(self):
        rng = np.random.default_rng(21)
        for shape, stride in (((2, 3, 6, 6), 1), ((1, 4, 7, 7), 2), ((2, 2, 5, 5), 1)):
            x = rand64(rng, shape, grad=True)
            w = rand64(rng, (shape[1], 1, 3, 3), grad=True, scale=0.4)
            gy = rng.standard_normal(T.depthwise_conv2d(x, w, None, stride, 1).data.shape)

            def loss():
                return T.tensor_sum(T.mul(T.depthwise_conv2d(x, w, None, stride, 1), T.Tensor(gy)))

            assert T.gradient_check(loss, [x, w], eps=1e-3) <= 1e-4

    def test_dense_default_example(self):
        rng = np.random.default_rng(22)
        for n, f, g in ((2, 3, 4), (1, 5, 2), (3, 2, 2)):
            x = rand64(rng, (n, f), grad=True)
            w = rand64(rng, (f, g), grad=True)
            b = rand64(rng, (g,), grad=True)
            gy = rng.standard_normal((n, g))

            def loss():
                return T.tensor_sum(T.mul(T.dense(x, w, b), T.Tensor(gy)))

            assert T.gradient_check(loss, [x, w, b], eps=1e-3) <= 1e-4

    def test_batchnorm(self):
        rng = np.random.default_rng(23)
        for shape in ((2, 2, 3, 3), (3, 4, 2, 2), (2, 1, 4, 4)):
            x = rand64(rng, shape, grad=True)
            gm = rand64(rng, (shape[1],), grad=True, scale=0.3)
            bt = rand64(rng, (shape[1],), grad=True, scale=0.3)
            gy = rng.standard_normal(shape)
            rm, rv = np.zeros(shape[1]), np.ones(shape[1])

            def loss():
                out = T.batchnorm(x, gm, bt, rm, rv, "train")
                return T.tensor_sum(T.mul(out, T.Tensor(gy)))

            assert T.gradient_check(loss, [x, gm, bt], eps=1e-3) <= 1e-4

    def test_activations(self):
        rng = np.random.default_rng(24)
        for kind in ("relu", "relu6", "linear"):
            for shape in ((2, 5), (3, 3), (7,)):
                x = T.Tensor(_away_from_kinks(rng, shape), requires_grad=True)
                gy = rng.standard_normal(shape)

                def loss():
                    return T.tensor_sum(T.mul(T.activation(x, kind), T.Tensor(gy)))

                assert T.gradient_check(loss, [x], eps=1e-3) <= 1e-4

    def test_maxpool(self):
        rng = np.random.default_rng(25)
        for shape, k, s in (((1, 2, 4, 4), 2, 2), ((2, 1, 5, 5), 2, 1), ((1, 3, 6, 6), 3, 3)):
            # distinct values keep the argmax stable under the eps nudges
            n = int(np.prod(shape))
            vals = rng.permutation(n).astype(np.float64) * 0.1
            x = T.Tensor(vals.reshape(shape), requires_grad=True)
            gy = rng.standard_normal(T.maxpool2d(x, k, s).data.shape)

            def loss():
                return T.tensor_sum(T.mul(T.maxpool2d(x, k, s), T.Tensor(gy)))

            assert T.gradient_check(loss, [x], eps=1e-3) <= 1e-4

    def test_gap_concat_softmax(self):
        rng = np.random.default_rng(26)
        for n in (1, 2, 3):
            x = rand64(rng, (n, 2, 3, 3), grad=True)
            a = rand64(rng, (n, 3), grad=True)
            labels = rng.integers(0, 2, n)

            def loss():
                f = T.concat_features(T.global_avg_pool(x), a)
                w = T.Tensor(np.ones((5, 2)) * 0.3)
                out, _ = T.softmax_cross_entropy(T.dense(f, w, T.Tensor(np.zeros(2))), labels)
                return out

            assert T.gradient_check(loss, [x, a], eps=1e-3) <= 1e-4

    def test_composite_conv_relu_dense_ce(self):
        rng = np.random.default_rng(27)
        x = rand64(rng, (2, 2, 6, 6), grad=True)
        w = rand64(rng, (3, 2, 3, 3), grad=True, scale=0.4)
        b = rand64(rng, (3,), grad=True, scale=0.1)
        wd = rand64(rng, (3, 2), grad=True, scale=0.5)
        bd = rand64(rng, (2,), grad=True, scale=0.1)
        labels = np.array([0, 1])

        def loss():
            h = T.activation(T.conv2d(x, w, b, 2, 1), "relu")
            f = T.global_avg_pool(h)
            out, _ = T.softmax_cross_entropy(T.dense(f, wd, bd), labels)
            return out

        assert T.gradient_check(loss, [x, w, b, wd, bd], eps=1e-3) <= 1e-4

    def test_zero_parameter_graph_is_vacuous(self):
        assert T.gradient_check(lambda: T.tensor_sum(T.Tensor([1.0])), [], eps=1e-3) == 0.0

    def test_doubled_analytic_gradient_reports_half(self):
        x = t64([1.0, 2.0, 3.0], grad=True)

        def loss():
            out = T.Tensor(np.asarray(x.data.sum()))
            # deliberately wrong backward rule: twice the true gradient
            out.node = T.Node((x,), lambda g: (2.0 * np.full(3, g.reshape(())),))
            out.requires_grad = True
            return out

        err = T.gradient_check(loss, [x], eps=1e-3)
        assert abs(err - 0.5) < 1e-6

    def test_eps_out_of_range_rejected(self):
        x = t64([1.0], grad=True)
        with pytest.raises(InvalidArgumentError):
            T.gradient_check(lambda: T.tensor_sum(x), [x], eps=1e-1)

    def test_float32_params_rejected(self):
        x = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            T.gradient_check(lambda: T.tensor_sum(x), [x], eps=1e-3)
