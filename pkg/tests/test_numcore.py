import numpy as np
import pytest

from wavequery.numcore import (
    ContractViolationError,
    LinearParams,
    RngStream,
    channel_stats,
    finite_diff_vjp_check,
    layer_normalize,
    layer_normalize_vjp,
    linear_apply,
    linear_vjp,
    load_feature_map,
    sample_gaussian,
    save_feature_map,
)


class TestChannelStats:
    def test_constant_channel(self):
        f = np.full((1, 1, 3, 3), 5.0)
        stats = channel_stats(f)
        assert stats.mu[0, 0] == 5.0
        assert stats.sigma[0, 0] == 0.0

    def test_two_values(self):
        # population std of {1, 3}: mean 2, sqrt(((1-2)^2 + (3-2)^2)/2) = 1
        f = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        stats = channel_stats(f)
        assert stats.mu[0, 0] == pytest.approx(2.0)
        assert stats.sigma[0, 0] == pytest.approx(1.0)

    def test_shape_contract(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        stats = channel_stats(f)
        assert stats.mu.shape == (2, 3)
        assert stats.sigma.shape == (2, 3)

    def test_renormalized_stats_hit_zero_one(self):
        # Normalizing by a channel's own stats must give mu ~ 0, sigma ~ 1.
        rng = np.random.default_rng(1)
        f = rng.normal(3.0, 2.5, size=(2, 4, 8, 8)).astype(np.float32)
        stats = channel_stats(f)
        assert np.all(stats.sigma > 1e-3)
        normed = (f - stats.mu[:, :, None, None]) / stats.sigma[:, :, None, None]
        renorm = channel_stats(normed)
        assert np.abs(renorm.mu).max() < 1e-5
        assert np.abs(renorm.sigma - 1.0).max() < 1e-5


class TestLinear:
    def test_identity(self):
        p = LinearParams(weight=np.eye(2), bias=np.zeros(2))
        np.testing.assert_array_equal(linear_apply(np.array([2.0, 4.0]), p), [2.0, 4.0])

    def test_direct_evaluation(self):
        p = LinearParams(weight=np.array([[1.0, 1.0]]), bias=np.array([1.0]))
        np.testing.assert_allclose(linear_apply(np.array([2.0, 3.0]), p), [6.0])

    def test_dim_mismatch(self):
        p = LinearParams(weight=np.eye(2), bias=np.zeros(2))
        with pytest.raises(ContractViolationError):
            linear_apply(np.zeros(3), p)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = LinearParams(weight=rng.normal(size=(3, 5)), bias=rng.normal(size=3))
        x = rng.normal(size=(4, 5))
        u = rng.normal(size=(4, 3))
        err = finite_diff_vjp_check(
            lambda v: linear_apply(v, p),
            lambda v, uu: linear_vjp(v, p, uu)[0],
            x, u)
        assert err < 1e-8


class TestLayerNormalize:
    def test_constant_input_collapses_to_beta(self):
        x = np.full((3, 4), 7.0)
        out = layer_normalize(x, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_point(self):
        out = layer_normalize(np.array([2.0, 4.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-6)

    def test_output_moments(self):
        rng = np.random.default_rng(3)
        x = rng.normal(2.0, 3.0, size=(5, 16))
        out = layer_normalize(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        gamma = rng.normal(size=6)
        u = rng.normal(size=(3, 6))
        err = finite_diff_vjp_check(
            lambda v: layer_normalize(v, gamma, np.zeros(6)),
            lambda v, uu: layer_normalize_vjp(v, gamma, uu)[0],
            x, u)
        assert err < 1e-7


class TestRng:
    def test_degenerate_std(self):
        out = sample_gaussian(RngStream(7), mean=3.0, std=0.0, count=10)
        np.testing.assert_array_equal(out, np.full(10, 3.0))

    def test_determinism(self):
        a = sample_gaussian(RngStream(42, counter=5), 0.0, 1.0, 100)
        b = sample_gaussian(RngStream(42, counter=5), 0.0, 1.0, 100)
        np.testing.assert_array_equal(a, b)

    def test_counter_advances(self):
        rng = RngStream(42)
        a = sample_gaussian(rng, 0.0, 1.0, 10)
        assert rng.counter == 1
        b = sample_gaussian(rng, 0.0, 1.0, 10)
        assert not np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        out = sample_gaussian(RngStream(11), mean=1.0, std=0.5, count=100_000)
        assert abs(out.mean() - 1.0) < 0.01
        assert abs(out.std() - 0.5) < 0.01

    def test_negative_std_rejected(self):
        with pytest.raises(ContractViolationError):
            sample_gaussian(RngStream(0), 0.0, -1.0, 4)


class TestFiniteDiffCheck:
    def test_identity(self):
        err = finite_diff_vjp_check(lambda x: x, lambda x, u: u,
                                    np.array([1.0, -2.0, 3.0]), np.array([0.5, 1.0, 2.0]))
        assert err < 1e-10

    def test_square(self):
        # d/dx x^2 at 3 is 6; central differences on a quadratic are exact.
        err = finite_diff_vjp_check(lambda x: x * x, lambda x, u: 2.0 * x * u,
                                    np.array([3.0]), np.array([1.0]))
        assert err < 1e-8

    def test_injected_fault_reports_half(self):
        err = finite_diff_vjp_check(lambda x: x * x, lambda x, u: 4.0 * x * u,
                                    np.array([3.0]), np.array([1.0]))
        assert abs(err - 0.5) < 1e-3

    def test_nonfinite_forward_rejected(self):
        with pytest.raises(ContractViolationError):
            finite_diff_vjp_check(lambda x: np.full_like(x, np.inf), lambda x, u: u,
                                  np.array([1.0]), np.array([1.0]))

    def test_tuple_output(self):
        def fwd(x):
            return x * 2.0, x.sum(keepdims=True)

        def bwd(x, u):
            return 2.0 * u[0] + u[1] * np.ones_like(x)

        err = finite_diff_vjp_check(fwd, bwd, np.array([1.0, 2.0]),
                                    (np.array([1.0, -1.0]), np.array([3.0])))
        assert err < 1e-8


class TestFeatureMapIO:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, dtype):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(2, 3, 5, 4)).astype(dtype)
        path = tmp_path / "map.dgfm"
        save_feature_map(path, f)
        loaded = load_feature_map(path)
        assert loaded.dtype == dtype
        np.testing.assert_array_equal(loaded, f)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.dgfm"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ContractViolationError):
            load_feature_map(path)
