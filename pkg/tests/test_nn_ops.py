"""CNN primitives against brute-force oracles and finite differences."""

import numpy as np
import pytest

from ghnq import nn
from ghnq.errors import ShapeError
from ghnq.gradcheck import check_gradients
from ghnq.tensor import Tensor, backward


def conv2d_loops(x, w, b=None, stride=1, padding=1, dilation=1, groups=1):
    """Direct 6-loop nested-sum convolution oracle (float64)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wid = x.shape
    cout, cin_g, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wid + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, oh, ow))
    cpg_out = cout // groups
    for ni in range(n):
        for co in range(cout):
            g = co // cpg_out
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky * dilation
                                ix = ox * stride + kx * dilation
                                acc += xp[ni, g * cin_g + ci, iy, ix] * w[co, ci, ky, kx]
                    out[ni, co, oy, ox] = acc + (0.0 if b is None else b[co])
    return out


def two_pass_stats(x):
    """Independent per-channel mean/variance oracle (two explicit passes)."""
    n, c, h, w = x.shape
    mean = np.zeros(c)
    for ci in range(c):
        mean[ci] = x[:, ci].sum() / (n * h * w)
    var = np.zeros(c)
    for ci in range(c):
        var[ci] = ((x[:, ci] - mean[ci]) ** 2).sum() / (n * h * w)
    return mean, var


class TestConv2d:
    def test_all_ones_sums_to_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = nn.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 6, 6)))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = nn.conv2d(x, Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_strided_matches_loop_oracle(self):
        r = np.random.default_rng(1)
        x = r.normal(size=(1, 2, 5, 5)).astype(np.float32)
        w = r.normal(size=(3, 2, 3, 3)).astype(np.float32)
        out = nn.conv2d(Tensor(x), Tensor(w), stride=2, padding=0)
        expect = conv2d_loops(x, w, stride=2, padding=0)
        np.testing.assert_allclose(out.data, expect, atol=1e-6)

    @pytest.mark.parametrize("stride,padding,dilation,groups", [
        (1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (2, 0, 1, 4),
    ])
    def test_variants_match_loop_oracle(self, stride, padding, dilation, groups):
        r = np.random.default_rng(stride * 7 + padding * 3 + dilation + groups)
        x = r.normal(size=(2, 4, 7, 7)).astype(np.float32)
        w = r.normal(size=(8, 4 // groups, 3, 3)).astype(np.float32)
        b = r.normal(size=(8,)).astype(np.float32)
        out = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                        padding=padding, dilation=dilation, groups=groups)
        expect = conv2d_loops(x, w, b, stride=stride, padding=padding,
                              dilation=dilation, groups=groups)
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_depthwise_equals_per_channel_conv(self):
        r = np.random.default_rng(5)
        c = 4
        x = r.normal(size=(2, c, 6, 6)).astype(np.float32)
        w = r.normal(size=(c, 1, 3, 3)).astype(np.float32)
        out = nn.conv2d(Tensor(x), Tensor(w), padding=1, groups=c)
        for ci in range(c):
            single = nn.conv2d(Tensor(x[:, ci:ci + 1]), Tensor(w[ci:ci + 1]), padding=1)
            np.testing.assert_allclose(out.data[:, ci], single.data[:, 0], atol=1e-6)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.ones((1, 3, 5, 5)))
        w = Tensor(np.ones((2, 4, 3, 3)))
        with pytest.raises(ShapeError, match="dim 1|channels"):
            nn.conv2d(x, w)

    def test_non_positive_output_extent(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="non-positive"):
            nn.conv2d(x, w, padding=0)

    def test_gradients(self):
        r = np.random.default_rng(9)
        x = r.normal(size=(2, 2, 5, 5))
        w = r.normal(size=(3, 2, 3, 3))
        b = r.normal(size=(3,))

        def fn(leaves):
            out = nn.conv2d(leaves[0], leaves[1], leaves[2], stride=2, padding=1)
            return (out * out).sum()

        check_gradients(fn, [x, w, b], min_pass_fraction=1.0)

    def test_grouped_gradients(self):
        r = np.random.default_rng(10)
        x = r.normal(size=(1, 4, 4, 4))
        w = r.normal(size=(4, 1, 3, 3))

        def fn(leaves):
            out = nn.conv2d(leaves[0], leaves[1], padding=1, groups=4)
            return (out * out).sum()

        check_gradients(fn, [x, w])


class TestShapeFormula:
    def test_exhaustive_against_direct_simulation(self):
        # slide a window explicitly and count valid placements
        for h in range(3, 9):
            for k in range(1, 4):
                for s in range(1, 4):
                    for p in range(0, 3):
                        for d in range(1, 3):
                            span = d * (k - 1) + 1
                            positions = 0
                            start = 0
                            while start + span <= h + 2 * p:
                                positions += 1
                                start += s
                            if positions > 0:
                                got = nn.conv_output_extent(h, k, s, p, d)
                                assert got == positions, (h, k, s, p, d)


class TestBatchNorm2d:
    def test_constant_input_gives_beta(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        gamma = Tensor(np.full(3, 2.0))
        beta = Tensor(np.array([1.0, -1.0, 0.5]))
        out, var, mean = nn.batchnorm2d(x, gamma, beta, eps=1e-5)
        for c, b in enumerate([1.0, -1.0, 0.5]):
            np.testing.assert_allclose(out.data[:, c], b, atol=1e-6)
        np.testing.assert_allclose(var.data, 0.0, atol=1e-6)

    def test_identity_normalization(self):
        eps = 1e-5
        r = np.random.default_rng(2)
        x = r.normal(size=(4, 2, 5, 5))
        # center and scale in float64 so each channel has mean 0, var 1-eps
        for c in range(2):
            ch = x[:, c]
            ch -= ch.mean()
            ch *= np.sqrt((1.0 - eps) / ch.var())
        x = x.astype(np.float32)
        out, _, _ = nn.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=eps)
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_statistics_match_two_pass_oracle(self):
        r = np.random.default_rng(3)
        x = r.normal(size=(2, 3, 4, 4)).astype(np.float32) * 2 + 1
        gamma = r.normal(size=3).astype(np.float32)
        eps = 1e-5
        out, var, mean = nn.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(np.zeros(3)), eps=eps)
        mean_o, var_o = two_pass_stats(x)
        np.testing.assert_allclose(mean.data, mean_o, atol=1e-5)
        np.testing.assert_allclose(var.data, var_o, atol=1e-5)
        # output is zero-mean with variance gamma^2 * var/(var+eps) per channel
        for c in range(3):
            ch = out.data[:, c]
            assert abs(ch.mean()) < 1e-6
            expect_var = gamma[c] ** 2 * var_o[c] / (var_o[c] + eps)
            np.testing.assert_allclose(ch.var(), expect_var, rtol=1e-4)

    def test_degenerate_batch_rejected(self):
        with pytest.raises(ShapeError, match=">= 2"):
            nn.batchnorm2d(Tensor(np.ones((1, 3, 1, 1))),
                           Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_gradients(self):
        r = np.random.default_rng(4)
        x = r.normal(size=(3, 2, 3, 3))
        gamma = r.normal(size=2) + 1.5
        beta = r.normal(size=2)

        def fn(leaves):
            out, _, _ = nn.batchnorm2d(leaves[0], leaves[1], leaves[2], eps=1e-3)
            return (out * out * 0.5 + out).sum()

        check_gradients(fn, [x, gamma, beta], min_pass_fraction=1.0)


class TestPooling:
    def test_max_pool_values(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = nn.max_pool2d(Tensor(x), kernel=2, stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_avg_pool_values(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = nn.avg_pool2d(Tensor(x), kernel=2, stride=2)
        np.testing.assert_allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_global_avg_pool(self):
        r = np.random.default_rng(6)
        x = r.normal(size=(2, 3, 4, 5)).astype(np.float32)
        out = nn.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=(2, 3)), atol=1e-6)

    def test_max_pool_gradients(self):
        r = np.random.default_rng(7)
        x = r.normal(size=(2, 2, 6, 6))
        check_gradients(
            lambda l: (nn.max_pool2d(l[0], kernel=3, stride=2, padding=1) *
                       nn.max_pool2d(l[0], kernel=3, stride=2, padding=1)).sum(), [x])

    def test_avg_pool_gradients(self):
        r = np.random.default_rng(8)
        x = r.normal(size=(1, 2, 5, 5))
        check_gradients(
            lambda l: (nn.avg_pool2d(l[0], kernel=2, stride=2) *
                       nn.avg_pool2d(l[0], kernel=2, stride=2)).sum(), [x])

    def test_global_avg_pool_gradients(self):
        r = np.random.default_rng(18)
        x = r.normal(size=(2, 3, 4, 4))
        check_gradients(lambda l: (nn.global_avg_pool(l[0]) *
                                   nn.global_avg_pool(l[0])).sum(), [x])


class TestLinearAndLoss:
    def test_linear_values(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
        b = Tensor(np.array([0.5, -0.5]))
        out = nn.linear(x, w, b)
        np.testing.assert_allclose(out.data, [[11.5, 16.5]])

    def test_linear_gradients(self):
        r = np.random.default_rng(11)
        x = r.normal(size=(3, 4))
        w = r.normal(size=(2, 4))
        b = r.normal(size=(2,))
        check_gradients(lambda l: (nn.linear(*l) * nn.linear(*l)).sum(), [x, w, b])

    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((4, 10)))
        loss = nn.softmax_cross_entropy(logits, np.arange(4) % 10)
        assert loss.item() == pytest.approx(np.log(10), rel=1e-6)

    def test_cross_entropy_gradients(self):
        r = np.random.default_rng(12)
        logits = r.normal(size=(5, 4))
        labels = np.array([0, 1, 2, 3, 1])
        check_gradients(lambda l: nn.softmax_cross_entropy(l[0], labels), [logits])

    def test_cross_entropy_stable_for_large_logits(self):
        logits = Tensor(np.array([[1000.0, -1000.0]]))
        loss = nn.softmax_cross_entropy(logits, np.array([0]))
        assert np.isfinite(loss.item())


class TestAdam:
    def test_zero_lr_leaves_params_bit_identical(self):
        r = np.random.default_rng(13)
        p = Tensor(r.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        before = p.data.copy()
        state = nn.AdamState([p])
        nn.adam_step([p], [r.normal(size=(4, 4)).astype(np.float32)], state,
                     lr=0.0, weight_decay=0.01)
        assert np.array_equal(p.data, before)
        assert p.data.tobytes() == before.tobytes()

    def test_descends_a_quadratic(self):
        p = Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)
        opt = nn.Adam([{"params": [p]}], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            backward((p * p).sum())
            opt.step()
        assert np.abs(p.data).max() < 0.1

    def test_decoupled_weight_decay_direction(self):
        p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        state = nn.AdamState([p])
        nn.adam_step([p], [np.zeros(1, dtype=np.float32)], state, lr=0.5, weight_decay=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_state_roundtrip(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        opt = nn.Adam([{"params": [p], "weight_decay": 0.0}], lr=0.01)
        p.grad = np.ones(3, dtype=np.float32)
        opt.step()
        blobs = opt.state_tensors()
        opt2 = nn.Adam([{"params": [p], "weight_decay": 0.0}], lr=0.01)
        opt2.load_state_tensors(blobs)
        assert opt2.groups[0]["state"].t == 1
        np.testing.assert_array_equal(opt2.groups[0]["state"].m[0],
                                      opt.groups[0]["state"].m[0])
