import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nv3d import tensor as T
from conftest import numeric_grad, rel_err


def brute_conv3d(x, w, b, stride, pad):
    """Loop-nest cross-correlation, independent of the im2col path."""
    cin, d, h, ww = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = ((n + 2 * pad - k) // stride + 1 for n in (d, h, ww))
    out = np.zeros((cout, od, oh, ow))
    for o, i, j, l in itertools.product(range(cout), range(od), range(oh), range(ow)):
        patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k]
        out[o, i, j, l] = np.sum(patch * w[o]) + b[o]
    return out


class TestConv3d:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(1, 5, 6, 7))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        y = T.conv3d(T.constant(x), T.constant(w), T.constant(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_all_ones_counts_neighbours(self):
        y = T.conv3d(T.constant(np.ones((1, 4, 4, 4))), T.constant(np.ones((1, 1, 3, 3, 3))),
                     T.constant(np.zeros(1)), padding=1).data[0]
        assert y[1, 1, 1] == 27 and y[2, 2, 1] == 27
        assert y[0, 0, 0] == 8 and y[3, 3, 3] == 8
        assert y[0, 1, 1] == 18  # face voxel: 2*3*3

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_loop_oracle(self, rng, stride, k):
        x = rng.normal(size=(3, 6, 6, 6))
        w = rng.normal(size=(2, 3, k, k, k))
        b = rng.normal(size=2)
        pad = (k - 1) // 2
        got = T.conv3d(T.constant(x), T.constant(w), T.constant(b), stride=stride).data
        np.testing.assert_allclose(got, brute_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_output_shape_formula(self, rng):
        x = T.constant(rng.normal(size=(2, 9, 8, 7)))
        y = T.conv3d(x, T.constant(rng.normal(size=(4, 2, 3, 3, 3))), T.constant(np.zeros(4)), stride=2)
        assert y.shape == (4, 5, 4, 4)

    def test_batched_equals_per_item(self, rng):
        x = rng.normal(size=(3, 2, 6, 6, 6))
        w, b = T.constant(rng.normal(size=(4, 2, 3, 3, 3))), T.constant(rng.normal(size=4))
        batched = T.conv3d(T.constant(x), w, b).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], T.conv3d(T.constant(x[i]), w, b).data, rtol=0, atol=1e-13)

    def test_shape_mismatch_names_both_shapes(self, rng):
        with pytest.raises(ValueError, match=r"\(2, 4, 4, 4\).*\(1, 3, 3, 3, 3\)"):
            T.conv3d(T.constant(np.zeros((2, 4, 4, 4))), T.constant(np.zeros((1, 3, 3, 3, 3))))

    def test_rejects_even_kernel_and_bad_stride(self):
        x = T.constant(np.zeros((1, 4, 4, 4)))
        with pytest.raises(ValueError):
            T.conv3d(x, T.constant(np.zeros((1, 1, 2, 2, 2))))
        with pytest.raises(ValueError):
            T.conv3d(x, T.constant(np.zeros((1, 1, 3, 3, 3))), stride=3)

    def test_linear_in_input_and_kernel(self, rng):
        x, y = rng.normal(size=(2, 2, 5, 5, 5))
        w, v = rng.normal(size=(2, 3, 2, 3, 3, 3))
        a, c = 0.7, -1.3
        conv = lambda inp, ker: T.conv3d(T.constant(inp), T.constant(ker)).data
        np.testing.assert_allclose(conv(a * x + c * y, w), a * conv(x, w) + c * conv(y, w), rtol=0, atol=1e-12)
        np.testing.assert_allclose(conv(x, a * w + c * v), a * conv(x, w) + c * conv(x, v), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient_matches_finite_differences(self, rng, stride):
        x = rng.normal(size=(1, 4, 4, 4))
        w = rng.normal(size=(2, 1, 3, 3, 3))
        b = rng.normal(size=2)
        probe = rng.normal(size=T.conv3d(T.constant(x), T.constant(w), stride=stride).shape)

        def f():
            return float(np.sum(probe * T.conv3d(T.constant(x), T.constant(w), T.constant(b), stride=stride).data))

        px, pw, pb = T.parameter(x, "x"), T.parameter(w, "w"), T.parameter(b, "b")
        loss = T.sum_all(T.mul(T.conv3d(px, pw, pb, stride=stride), T.constant(probe)))
        g = T.backward(loss)
        assert rel_err(g["x"].ravel(), numeric_grad(f, x)) < 1e-6
        assert rel_err(g["w"].ravel(), numeric_grad(f, w)) < 1e-6
        assert rel_err(g["b"].ravel(), numeric_grad(f, b)) < 1e-6

    def test_gradient_of_plain_sum(self, rng):
        x = rng.normal(size=(1, 4, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3, 3))
        f = lambda: float(T.conv3d(T.constant(x), T.constant(w)).data.sum())
        g = T.backward(T.sum_all(T.conv3d(T.parameter(x, "x"), T.parameter(w, "w"))))
        assert rel_err(g["x"].ravel(), numeric_grad(f, x)) < 1e-6
        assert rel_err(g["w"].ravel(), numeric_grad(f, w)) < 1e-6


class TestGelu:
    def test_reference_values(self):
        vals = T.gelu(T.constant(np.array([0.0, 1.0, -10.0]))).data
        assert vals[0] == 0.0
        assert vals[1] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)
        assert vals[1] == pytest.approx(0.841345, abs=5e-7)
        assert abs(vals[2]) < 1e-9

    def test_monotone_on_positive_axis(self):
        x = np.linspace(0, 6, 2001)
        assert np.all(np.diff(T.gelu(T.constant(x)).data) > 0)

    def test_gradient(self, rng):
        x = rng.normal(size=(1, 3, 3, 3)) * 2
        f = lambda: float(T.gelu(T.constant(x)).data.sum())
        g = T.backward(T.sum_all(T.gelu(T.parameter(x, "x"))))
        assert rel_err(g["x"].ravel(), numeric_grad(f, x)) < 1e-6


class TestUpsample:
    def test_single_voxel(self):
        y = T.upsample_nearest2x(T.constant(np.full((1, 1, 1, 1), 2.5))).data
        assert y.shape == (1, 2, 2, 2) and np.all(y == 2.5)

    def test_block_mean_recovers_input(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        y = T.upsample_nearest2x(T.constant(x)).data
        pooled = y.reshape(2, 3, 2, 4, 2, 5, 2).mean(axis=(2, 4, 6))
        np.testing.assert_array_equal(pooled, x)

    def test_gradient_is_block_sum(self, rng):
        x = rng.normal(size=(1, 2, 2, 3))
        probe = rng.normal(size=(1, 4, 4, 6))
        f = lambda: float(np.sum(probe * T.upsample_nearest2x(T.constant(x)).data))
        g = T.backward(T.sum_all(T.mul(T.upsample_nearest2x(T.parameter(x, "x")), T.constant(probe))))
        assert rel_err(g["x"].ravel(), numeric_grad(f, x)) < 1e-6
        np.testing.assert_allclose(g["x"], probe.reshape(1, 2, 2, 2, 2, 3, 2).sum(axis=(2, 4, 6)), atol=1e-14)


class TestConcat:
    def test_empty_second_operand(self, rng):
        x = rng.normal(size=(2, 3, 3, 3))
        y = T.concat_channels(T.constant(x), T.constant(np.zeros((0, 3, 3, 3))))
        np.testing.assert_array_equal(y.data, x)

    def test_channel_ranges(self, rng):
        a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
        y = T.concat_channels(T.constant(a), T.constant(b)).data
        assert np.array_equal(y[:2], a) and np.array_equal(y[2:], b)

    def test_gradient_splits_by_channel(self, rng):
        a, b = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))
        probe = rng.normal(size=(3, 2, 2, 2))
        g = T.backward(T.sum_all(T.mul(T.concat_channels(T.parameter(a, "a"), T.parameter(b, "b")),
                                       T.constant(probe))))
        fa = lambda: float(np.sum(probe * np.concatenate([a, b])))
        assert rel_err(g["a"].ravel(), numeric_grad(fa, a)) < 1e-6
        assert rel_err(g["b"].ravel(), numeric_grad(fa, b)) < 1e-6
        np.testing.assert_array_equal(g["a"], probe[:1])

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.concat_channels(T.constant(np.zeros((1, 2, 2, 2))), T.constant(np.zeros((1, 2, 2, 3))))


class TestReduceMean:
    def test_single_tensor(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        np.testing.assert_array_equal(T.reduce_mean_batch([T.constant(x)], [7.0]).data, x)

    def test_equal_tensors(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        out = T.reduce_mean_batch([T.constant(x), T.constant(x)], [3.0, 1.0]).data
        np.testing.assert_allclose(out, x, rtol=1e-15)

    def test_weighted_values(self):
        out = T.reduce_mean_batch([T.constant(np.ones((1, 1, 1, 1))), T.constant(np.full((1, 1, 1, 1), 3.0))],
                                  [3.0, 1.0])
        assert out.data.item() == 1.5

    def test_rejects_empty_and_zero_weights(self):
        with pytest.raises(ValueError):
            T.reduce_mean_batch([], [])
        with pytest.raises(ValueError):
            T.reduce_mean_batch([T.constant(np.ones(2))], [0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 7))
    def test_permutation_invariant_bitwise(self, seed, n):
        rng = np.random.default_rng(seed)
        xs = [rng.normal(size=(1, 2, 3, 3)) for _ in range(n)]
        ws = list(rng.uniform(0.1, 5.0, size=n))
        perm = rng.permutation(n)
        a = T.reduce_mean_batch([T.constant(x) for x in xs], ws).data
        b = T.reduce_mean_batch([T.constant(xs[i]) for i in perm], [ws[i] for i in perm]).data
        assert np.array_equal(a, b)

    def test_gradient(self, rng):
        xs = [rng.normal(size=(1, 2, 2, 2)) for _ in range(3)]
        ws = [1.0, 2.0, 0.5]
        probe = rng.normal(size=(1, 2, 2, 2))
        ps = [T.parameter(x, f"x{i}") for i, x in enumerate(xs)]
        g = T.backward(T.sum_all(T.mul(T.reduce_mean_batch(ps, ws), T.constant(probe))))
        for i, x in enumerate(xs):
            f = lambda: float(np.sum(probe * sum(w * v for w, v in zip(ws, xs)) / sum(ws)))
            assert rel_err(g[f"x{i}"].ravel(), numeric_grad(f, x)) < 1e-6

    def test_batch_mean_order_free(self, rng):
        x = rng.normal(size=(5, 2, 3, 3, 3))
        perm = rng.permutation(5)
        assert np.array_equal(T.batch_mean(T.constant(x)).data, T.batch_mean(T.constant(x[perm])).data)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        p = T.parameter(rng.normal(size=(2, 3)), "p")
        np.testing.assert_array_equal(T.backward(T.sum_all(p))["p"], np.ones((2, 3)))

    def test_square(self):
        p = T.parameter(np.full((1, 1, 1, 1), 3.0), "p")
        assert T.backward(T.sum_all(T.mul(p, p)))["p"].item() == 6.0

    def test_non_scalar_rejected(self):
        p = T.parameter(np.ones(3), "p")
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.gelu(p))

    def test_detach_keeps_value_drops_gradient(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        p = T.parameter(x, "x")
        f = T.gelu(p)
        h = T.scale(p, 3.0)
        g = T.add(T.detach(f), h)
        np.testing.assert_array_equal(g.data, f.data + h.data)
        grads = T.backward(T.sum_all(g))
        np.testing.assert_array_equal(grads["x"], np.full(x.shape, 3.0))

    def test_shared_node_visited_once(self, rng):
        x = rng.normal(size=(3,))
        p = T.parameter(x, "p")
        q = T.gelu(p)
        loss = T.sum_all(T.add(q, q))
        f = lambda: float(2 * T.gelu(T.constant(x)).data.sum())
        assert rel_err(T.backward(loss)["p"], numeric_grad(f, x)) < 1e-8

    def test_missing_params_get_zero(self):
        a, b = T.parameter(np.ones(2), "a"), T.parameter(np.ones(2), "b")
        g = T.backward(T.sum_all(a), [a, b])
        np.testing.assert_array_equal(g["b"], np.zeros(2))

    def test_no_grad_records_nothing(self):
        p = T.parameter(np.ones(2), "p")
        with T.no_grad():
            y = T.gelu(p)
        assert not y.requires_grad and y.parents == ()


class TestActivationMeter:
    def test_counts_and_releases(self):
        meter = T.ActivationMeter()
        x = T.constant(np.ones((1, 4, 4, 4)))
        with T.track_activations(meter):
            y = T.gelu(x)
            assert meter.live == y.data.nbytes
            del y
        assert meter.live == 0
        assert meter.peak == 64 * 8

    def test_leaves_not_counted(self):
        meter = T.ActivationMeter()
        with T.track_activations(meter):
            T.constant(np.ones(100))
        assert meter.peak == 0
