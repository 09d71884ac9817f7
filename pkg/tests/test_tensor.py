"""Forward-value oracles and contract checks for the tensor engine.

Gradient correctness is covered by the finite-difference suite in
test_gradcheck; here the forward values are pitted against independent
nested-loop references and the error contracts are exercised.
"""
import numpy as np
import pytest

from tandemseg.errors import (ConfigError, DimensionError, EngineError,
                              UsageError)
from tandemseg.tensor import (Tensor, add, batchnorm2d, concat, conv2d,
                              default_dtype, dropout, grid_subsample2x,
                              maxpool2x2, no_grad, precision, relu, sigmoid,
                              upsample_nearest2x)


def conv2d_reference(x, w, b, stride):
    """Dead-slow nested-loop convolution with TF-style 'same' padding."""
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    oh = -(-h // stride)
    ow = -(-wdt // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - wdt, 0)
    top, left = pad_h // 2, pad_w // 2
    xp = np.pad(x, ((0, 0), (0, 0), (top, pad_h - top), (left, pad_w - left)))
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, oy * stride + ky, ox * stride + kx]
                                        * w[co, ci, ky, kx])
                    out[ni, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


class TestArithmetic:
    def test_add_broadcasts_like_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 1))
        out = Tensor(a) + Tensor(b)
        np.testing.assert_allclose(out.data, a.astype(np.float32) + b.astype(np.float32),
                                   rtol=1e-6)

    def test_scalar_operands_are_lifted(self):
        t = Tensor([1.0, 2.0])
        np.testing.assert_allclose((2.0 * t - 1.0).data, [1.0, 3.0])
        np.testing.assert_allclose((1.0 / t).data, [1.0, 0.5])

    def test_sum_returns_zero_dim_scalar(self):
        s = Tensor(np.ones((3, 3))).sum()
        assert s.data.shape == ()
        assert s.item() == 9.0

    def test_mean_matches_numpy(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 5))
        assert Tensor(a).mean().item() == pytest.approx(a.astype(np.float32).mean(), rel=1e-6)

    def test_strict_add_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), track_grad=True)
        with pytest.raises(UsageError):
            (t * 2.0).backward()

    def test_backward_accumulates_into_leaves(self):
        t = Tensor(np.array([1.0, 2.0, 3.0]), track_grad=True)
        (t * t).sum().backward()
        np.testing.assert_allclose(t.grad, [2.0, 4.0, 6.0])

    def test_assert_finite_raises_on_nan(self):
        t = Tensor(np.array([1.0, np.nan]))
        with pytest.raises(EngineError):
            t.assert_finite("probe")


class TestContexts:
    def test_no_grad_suppresses_graph(self):
        t = Tensor(np.ones(2), track_grad=True)
        with no_grad():
            out = t * 3.0
        assert out._grad_fn is None
        assert out._parents == ()

    def test_precision_controls_default_dtype(self):
        with precision("double"):
            assert default_dtype() == np.float64
            assert Tensor([1.0]).data.dtype == np.float64
        with precision("single"):
            assert Tensor([1.0]).data.dtype == np.float32

    def test_precision_rejects_unknown_mode(self):
        with pytest.raises(ConfigError):
            with precision("quad"):
                pass

    def test_zero_dim_input_stays_zero_dim(self):
        assert Tensor(np.float64(3.0)).data.shape == ()


class TestActivations:
    def test_relu_clamps_negatives(self):
        out = relu(Tensor(np.array([-2.0, 0.0, 1.5])))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 1.5])

    def test_sigmoid_matches_closed_form(self):
        x = np.linspace(-4, 4, 9)
        out = sigmoid(Tensor(x))
        np.testing.assert_allclose(out.data, 1.0 / (1.0 + np.exp(-x)), rtol=1e-6)


class TestConv2d:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_nested_loop_reference(self, stride):
        rng = np.random.default_rng(7)
        for trial in range(4):
            cin, cout = rng.integers(1, 4), rng.integers(1, 4)
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            k = int(rng.choice([1, 3]))
            x = rng.normal(size=(2, cin, h, w))
            wt = rng.normal(size=(cout, cin, k, k))
            b = rng.normal(size=cout)
            out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride)
            ref = conv2d_reference(x.astype(np.float32), wt.astype(np.float32),
                                   b.astype(np.float32), stride)
            assert out.shape == ref.shape
            np.testing.assert_allclose(out.data, ref, rtol=1e-4, atol=1e-5)

    def test_same_padding_output_shape(self):
        x = Tensor(np.zeros((1, 1, 7, 5)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        assert conv2d(x, w, None, stride=1).shape == (1, 2, 7, 5)
        assert conv2d(x, w, None, stride=2).shape == (1, 2, 4, 3)

    def test_rejects_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((3, 1, 3, 3)))
        with pytest.raises(DimensionError):
            conv2d(x, w, None)


class TestPoolingAndResampling:
    def test_maxpool_matches_blockwise_max(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 8))
        out = maxpool2x2(Tensor(x))
        ref = x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5))
        np.testing.assert_allclose(out.data, ref.astype(np.float32), rtol=1e-6)

    def test_maxpool_rejects_odd_extent(self):
        with pytest.raises(DimensionError):
            maxpool2x2(Tensor(np.zeros((1, 1, 5, 4))))

    def test_upsample_repeats_pixels(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        out = upsample_nearest2x(Tensor(x))
        ref = x.repeat(2, axis=2).repeat(2, axis=3)
        np.testing.assert_allclose(out.data, ref)

    def test_grid_subsample_takes_even_corners(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = grid_subsample2x(Tensor(x))
        np.testing.assert_allclose(out.data, x[:, :, ::2, ::2])

    def test_subsample_inverts_upsample(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 2, 3, 5))
        round_trip = grid_subsample2x(upsample_nearest2x(Tensor(x)))
        np.testing.assert_allclose(round_trip.data, x.astype(np.float32))


class TestConcat:
    def test_concatenates_along_channels(self):
        a = np.ones((1, 2, 3, 3))
        b = np.zeros((1, 1, 3, 3))
        out = concat([Tensor(a), Tensor(b)], axis=1)
        assert out.shape == (1, 3, 3, 3)
        np.testing.assert_allclose(out.data, np.concatenate([a, b], axis=1))

    def test_rejects_empty_list(self):
        with pytest.raises(UsageError):
            concat([], axis=1)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        out = dropout(Tensor(x), 0.5, None, train=False)
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_train_mode_scales_survivors(self):
        rng = np.random.default_rng(5)
        x = np.ones((1, 1, 64, 64))
        out = dropout(Tensor(x), 0.25, rng, train=True).data
        survivors = out != 0.0
        # survivors carry 1/(1-p); the keep rate concentrates near 75%
        np.testing.assert_allclose(out[survivors], 1.0 / 0.75, rtol=1e-6)
        assert 0.65 < survivors.mean() < 0.85

    def test_p_zero_is_identity_even_in_train(self):
        x = np.random.default_rng(1).normal(size=(3, 3))
        out = dropout(Tensor(x), 0.0, np.random.default_rng(0), train=True)
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_train_mode_without_rng_raises(self):
        with pytest.raises(UsageError):
            dropout(Tensor(np.ones(4)), 0.5, None, train=True)

    def test_invalid_probability_raises(self):
        with pytest.raises(ConfigError):
            dropout(Tensor(np.ones(4)), 1.0, np.random.default_rng(0), train=True)


class TestBatchNorm:
    def setup_method(self):
        rng = np.random.default_rng(21)
        self.x = rng.normal(loc=1.5, scale=2.0, size=(4, 3, 5, 5))
        self.gamma = Tensor(np.ones(3))
        self.beta = Tensor(np.zeros(3))

    def test_train_mode_normalizes_batch(self):
        rm = np.zeros(3, dtype=np.float64)
        rv = np.ones(3, dtype=np.float64)
        out = batchnorm2d(Tensor(self.x), self.gamma, self.beta, rm, rv, train=True)
        per_channel = out.data.transpose(1, 0, 2, 3).reshape(3, -1)
        np.testing.assert_allclose(per_channel.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(per_channel.std(axis=1), 1.0, atol=1e-3)

    def test_train_mode_updates_running_stats_in_place(self):
        rm = np.zeros(3, dtype=np.float64)
        rv = np.ones(3, dtype=np.float64)
        batchnorm2d(Tensor(self.x), self.gamma, self.beta, rm, rv, train=True)
        batch_mean = self.x.mean(axis=(0, 2, 3))
        batch_var = self.x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, 0.9 * 0.0 + 0.1 * batch_mean, rtol=1e-5)
        np.testing.assert_allclose(rv, 0.9 * 1.0 + 0.1 * batch_var, rtol=1e-5)

    def test_eval_mode_uses_running_stats_and_preserves_them(self):
        rm = np.full(3, 0.5, dtype=np.float64)
        rv = np.full(3, 4.0, dtype=np.float64)
        out = batchnorm2d(Tensor(self.x), self.gamma, self.beta, rm, rv, train=False)
        expect = (self.x - 0.5) / np.sqrt(4.0 + 1e-5)
        np.testing.assert_allclose(out.data, expect, rtol=1e-5)
        np.testing.assert_array_equal(rm, np.full(3, 0.5))
        np.testing.assert_array_equal(rv, np.full(3, 4.0))

    def test_gamma_beta_rescale_output(self):
        rm = np.zeros(3, dtype=np.float64)
        rv = np.ones(3, dtype=np.float64)
        gamma = Tensor(np.array([2.0, 1.0, 0.5]))
        beta = Tensor(np.array([0.0, 1.0, -1.0]))
        plain = batchnorm2d(Tensor(self.x), self.gamma, self.beta,
                            rm.copy(), rv.copy(), train=True)
        scaled = batchnorm2d(Tensor(self.x), gamma, beta, rm, rv, train=True)
        expect = plain.data * np.array([2.0, 1.0, 0.5])[:, None, None] \
            + np.array([0.0, 1.0, -1.0])[:, None, None]
        np.testing.assert_allclose(scaled.data, expect, rtol=1e-5, atol=1e-6)


class TestThreadIsolation:
    """Grad mode and precision are per-thread; a worker must never be able
    to flip either for the rest of the process."""

    def test_worker_no_grad_does_not_leak_to_main(self):
        import threading
        entered = threading.Event()
        release = threading.Event()

        def worker():
            with no_grad():
                entered.set()
                release.wait(timeout=10)

        t = threading.Thread(target=worker)
        t.start()
        try:
            assert entered.wait(timeout=10)
            a = Tensor(np.ones(2), track_grad=True)
            out = (a + 1.0).sum()  # built while the worker sits inside no_grad
            assert out._grad_fn is not None
        finally:
            release.set()
            t.join()

    def test_concurrent_no_grad_blocks_leave_mode_intact(self):
        from concurrent.futures import ThreadPoolExecutor

        def worker(_):
            with no_grad():
                a = Tensor(np.ones(4), track_grad=True)
                out = (a * 3.0).sum()
                assert out._grad_fn is None
            return True

        with ThreadPoolExecutor(max_workers=4) as pool:
            assert all(pool.map(worker, range(64)))
        a = Tensor(np.ones(3), track_grad=True)
        out = (a * 2.0).sum()
        assert out._grad_fn is not None

    def test_precision_is_thread_scoped(self):
        import threading
        entered = threading.Event()
        release = threading.Event()
        seen = {}

        def worker():
            with precision("double"):
                seen["worker"] = default_dtype()
                entered.set()
                release.wait(timeout=10)

        t = threading.Thread(target=worker)
        t.start()
        try:
            assert entered.wait(timeout=10)
            assert default_dtype() == np.float32  # main thread unaffected
        finally:
            release.set()
            t.join()
        assert seen["worker"] == np.float64
