import numpy as np
import pytest

import mifc.tensor as T
from mifc import blocks as B
from mifc.errors import InvalidArgumentError
from mifc.prng import SplitMix64


def batch(rng, shape, dtype=np.float32):
    return T.Tensor(rng.random(shape, dtype=np.float64).astype(dtype))


class TestInvertedResidual:
    def test_skip_active_keeps_shape(self):
        block = B.build_inverted_residual(16, (1, 16, 1), SplitMix64(0))
        x = batch(np.random.default_rng(0), (2, 16, 8, 8))
        y = block(x, "train")
        assert y.data.shape == x.data.shape
        assert block.use_skip

    def test_stride_two_no_skip_halves_spatial(self):
        block = B.build_inverted_residual(16, (6, 24, 2), SplitMix64(0))
        x = batch(np.random.default_rng(1), (2, 16, 8, 8))
        y = block(x, "train")
        assert not block.use_skip
        assert y.data.shape == (2, 24, 4, 4)

    def test_zero_projection_with_skip_is_identity(self):
        block = B.build_inverted_residual(8, (2, 8, 1), SplitMix64(3))
        block.project.w.data[...] = 0.0
        x = batch(np.random.default_rng(2), (2, 8, 4, 4))
        y = block(x, "train")
        assert np.array_equal(y.data, x.data)

    def test_skip_rule_over_mobilenet_stage_table(self):
        # first block of a stage skips only when stride 1 and channels match
        ch = B.MOBILENET_STEM_CH
        for t, c, n, s in B.MOBILENET_STAGES:
            for bi in range(n):
                stride = s if bi == 0 else 1
                block = B.build_inverted_residual(ch, (t, c, stride), SplitMix64(0))
                assert block.use_skip == (stride == 1 and ch == c)
                ch = c


class TestBackbones:
    def test_mobilenet_feature_shape(self):
        bb = B.build_mobilenet_lite(3, 64, SplitMix64(1))
        x = batch(np.random.default_rng(3), (1, 3, 64, 64))
        assert bb(x, "train").data.shape == (1, 128)

    def test_vgg_feature_shape(self):
        bb = B.build_vgg_lite(3, 64, SplitMix64(1))
        x = batch(np.random.default_rng(4), (1, 3, 64, 64))
        assert bb(x, "train").data.shape == (1, 128)

    def test_vgg_has_six_conv_layers(self):
        bb = B.build_vgg_lite(3, 64, SplitMix64(1))
        convs = {n for n in bb.param_set.params if ".c" in n and n.endswith(".w")}
        assert len(convs) == 6

    def test_input_below_minimum_rejected(self):
        with pytest.raises(InvalidArgumentError):
            B.build_mobilenet_lite(3, 31, SplitMix64(0))
        with pytest.raises(InvalidArgumentError):
            B.build_vgg_lite(3, 16, SplitMix64(0))

    def test_backbones_work_at_minimum_size(self):
        rng = np.random.default_rng(5)
        for build in (B.build_mobilenet_lite, B.build_vgg_lite):
            bb = build(1, 32, SplitMix64(0))
            assert bb(batch(rng, (2, 1, 32, 32)), "train").data.shape == (2, 128)

    def test_same_seed_same_parameters(self):
        a = B.build_mobilenet_lite(3, 64, SplitMix64(9))
        b = B.build_mobilenet_lite(3, 64, SplitMix64(9))
        for name, t in a.param_set.params.items():
            assert np.array_equal(t.data, b.param_set.params[name].data)


def analytic_multi_mobilenet_count(hidden=128):
    """Closed-form parameter total from the published stage tables."""

    def conv(i, o, k, bias=False):
        return o * i * k * k + (o if bias else 0)

    def bn(c):
        return 2 * c

    total = 0
    for in_ch in (3, 1):  # rgb branch, silhouette branch
        ch = in_ch
        total += conv(ch, 16, 3) + bn(16)  # stem
        ch = 16
        for t, c, n, s in ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 2, 2), (6, 64, 2, 2)):
            for _ in range(n):
                mid = t * ch
                total += conv(ch, mid, 1) + bn(mid)  # expand
                total += mid * 1 * 3 * 3 + bn(mid)  # depthwise
                total += conv(mid, c, 1) + bn(c)  # project
                ch = c
        total += conv(ch, 128, 1) + bn(128)  # head conv
    total += 256 * hidden + hidden  # fusion fc1
    total += hidden * 2 + 2  # fc2
    return total


class TestModels:
    def test_multi_forward_shape(self):
        m = B.build_multi_input("mobilenet_lite", (3, 64, 64), (1, 64, 64), prng=SplitMix64(0))
        rng = np.random.default_rng(6)
        logits = B.model_forward(m, batch(rng, (16, 3, 64, 64)), batch(rng, (16, 1, 64, 64)),
                                 mode="train")
        assert logits.data.shape == (16, 2)

    def test_branch_names_disjoint(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(0))
        rgb = {n for n in m.params if n.startswith("rgb.")}
        sil = {n for n in m.params if n.startswith("sil.")}
        head = {n for n in m.params if n.startswith("head.")}
        assert rgb and sil and head
        assert rgb | sil | head == set(m.params)

    def test_zeroed_silhouette_head_makes_logits_sil_invariant(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(4))
        m.params["head.fc1.w"].data[128:, :] = 0.0
        rng = np.random.default_rng(7)
        rgb = batch(rng, (2, 3, 64, 64))
        a = B.model_forward(m, rgb, batch(rng, (2, 1, 64, 64)), mode="eval")
        b = B.model_forward(m, rgb, batch(rng, (2, 1, 64, 64)), mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_single_input_shape_and_param_subset(self):
        s = B.build_single_input("mobilenet_lite", prng=SplitMix64(0))
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(0))
        logits = B.model_forward(s, batch(np.random.default_rng(8), (4, 3, 64, 64)), mode="train")
        assert logits.data.shape == (4, 2)
        assert B.param_count(s) < B.param_count(m)

    def test_single_and_multi_share_rgb_init(self):
        s = B.build_single_input("vgg_lite", prng=SplitMix64(21))
        m = B.build_multi_input("vgg_lite", prng=SplitMix64(21))
        for name, t in s.params.items():
            if name.startswith("rgb."):
                assert np.array_equal(t.data, m.params[name].data)

    def test_eval_mode_is_pure(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(2))
        rng = np.random.default_rng(9)
        rgb, sil = batch(rng, (3, 3, 64, 64)), batch(rng, (3, 1, 64, 64))
        a = B.model_forward(m, rgb, sil, mode="eval")
        b = B.model_forward(m, rgb, sil, mode="eval")
        assert np.array_equal(a.data, b.data)
        assert a.node is None  # no tape in eval mode

    def test_eval_permutation_equivariance(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(3))
        rng = np.random.default_rng(10)
        rgb, sil = batch(rng, (5, 3, 64, 64)), batch(rng, (5, 1, 64, 64))
        perm = np.array([3, 0, 4, 1, 2])
        a = B.model_forward(m, rgb, sil, mode="eval").data
        b = B.model_forward(m, T.Tensor(rgb.data[perm]), T.Tensor(sil.data[perm]), mode="eval").data
        assert np.array_equal(a[perm], b)

    def test_missing_silhouette_rejected(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(0))
        with pytest.raises(InvalidArgumentError):
            B.model_forward(m, batch(np.random.default_rng(0), (2, 3, 64, 64)), None, mode="eval")

    def test_mismatched_branch_shapes_rejected(self):
        with pytest.raises(InvalidArgumentError):
            B.build_multi_input("mobilenet_lite", (3, 64, 64), (1, 32, 32), prng=SplitMix64(0))
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(0))
        rng = np.random.default_rng(11)
        with pytest.raises(InvalidArgumentError):
            B.model_forward(m, batch(rng, (2, 3, 64, 64)), batch(rng, (2, 1, 32, 32)), mode="eval")

    def test_unknown_kind_and_arch(self):
        with pytest.raises(InvalidArgumentError):
            B.build_multi_input("resnet", prng=SplitMix64(0))
        with pytest.raises(InvalidArgumentError):
            B.build_model("dual", "mobilenet_lite", 64)


class TestParamCount:
    def test_dense_two_by_two(self):
        ps = B.ParamSet("f32")
        B.Dense(ps, "fc", 2, 2, SplitMix64(0))
        assert sum(t.data.size for t in ps.params.values()) == 6

    def test_conv_three_to_sixteen_with_bias(self):
        ps = B.ParamSet("f32")
        B.Conv(ps, "conv", 3, 16, 3, 1, 1, SplitMix64(0), bias=True)
        assert sum(t.data.size for t in ps.params.values()) == 448

    def test_multi_mobilenet_matches_analytic_sum(self):
        m = B.build_multi_input("mobilenet_lite", prng=SplitMix64(0))
        assert B.param_count(m) == analytic_multi_mobilenet_count()

    def test_count_excludes_running_stats(self):
        m = B.build_single_input("mobilenet_lite", prng=SplitMix64(0))
        assert B.param_count(m) == sum(t.data.size for t in m.params.values())
        assert len(m.buffers) > 0


class TestEndToEndGradients:
    """Whole-model gradient checks at 32x32, batch 2, float64 (subsampled
    coordinates; the acceptance suite runs the timed full version)."""

    @pytest.mark.parametrize("kind", ["mobilenet_lite", "vgg_lite"])
    def test_multi_input_model(self, kind):
        model = B.build_multi_input(kind, (3, 32, 32), (1, 32, 32), hidden=16,
                                    prng=SplitMix64(5), dtype="f64")
        rng = np.random.default_rng(12)
        rgb = T.Tensor(rng.random((2, 3, 32, 32)))
        sil = T.Tensor(rng.random((2, 1, 32, 32)))
        labels = np.array([0, 1])

        def loss():
            logits = model.forward(rgb, sil, mode="train")
            out, _ = T.softmax_cross_entropy(logits, labels)
            return out

        params = list(model.params.values())
        err = T.gradient_check(loss, params, eps=1e-3, max_coords_per_param=1, seed=99)
        assert err <= 1e-4
