import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavequery.numcore import ContractViolationError, RngStream, finite_diff_vjp_check
from wavequery.wavelet import (
    SubBands,
    dwt2,
    dwt2_vjp,
    idwt2,
    idwt2_vjp,
    wavelet_backward,
)


def random_map(shape, seed=0, dtype=np.float64):
    return RngStream(seed).normal(0.0, 1.0, size=shape).astype(dtype)


class TestAnalysis:
    def test_constant_input(self):
        f = np.ones((1, 1, 2, 2))
        s = dwt2(f)
        np.testing.assert_allclose(s.ll, 2.0)
        np.testing.assert_allclose(s.lh, 0.0)
        np.testing.assert_allclose(s.hl, 0.0)
        np.testing.assert_allclose(s.hh, 0.0)

    def test_single_block_hand_computed(self):
        # Separable Haar on [[1, 2], [3, 4]] with L = [1, 1]/sqrt(2),
        # H = [-1, 1]/sqrt(2): width pass gives rows (3, 1)/sqrt(2) and
        # (7, 1)/sqrt(2); the height pass then yields ll=5, lh=1, hl=2, hh=0.
        f = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        s = dwt2(f)
        assert s.ll[0, 0, 0, 0] == pytest.approx(5.0)
        assert s.lh[0, 0, 0, 0] == pytest.approx(1.0)
        assert s.hl[0, 0, 0, 0] == pytest.approx(2.0)
        assert s.hh[0, 0, 0, 0] == pytest.approx(0.0)

    def test_energy_preserved(self):
        f = random_map((1, 1, 4, 4), seed=1)
        s = dwt2(f)
        band_energy = sum(float((b ** 2).sum()) for b in s.bands())
        assert band_energy == pytest.approx(float((f ** 2).sum()), abs=1e-10)

    def test_linearity(self):
        f = random_map((1, 2, 4, 6), seed=2)
        g = random_map((1, 2, 4, 6), seed=3)
        lhs = dwt2(2.5 * f + g)
        rhs_f, rhs_g = dwt2(f), dwt2(g)
        for left, rf, rg in zip(lhs.bands(), rhs_f.bands(), rhs_g.bands()):
            np.testing.assert_allclose(left, 2.5 * rf + rg, atol=1e-5)


class TestSynthesis:
    def test_constant_inverse(self):
        s = SubBands(ll=np.full((1, 1, 1, 1), 2.0),
                     lh=np.zeros((1, 1, 1, 1)),
                     hl=np.zeros((1, 1, 1, 1)),
                     hh=np.zeros((1, 1, 1, 1)))
        np.testing.assert_allclose(idwt2(s), np.ones((1, 1, 2, 2)))

    @pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 8, 6), (1, 2, 2, 10)])
    def test_roundtrip_even(self, shape):
        f = random_map(shape, seed=4)
        np.testing.assert_allclose(idwt2(dwt2(f)), f, atol=1e-10)

    @pytest.mark.parametrize("shape", [(1, 1, 5, 4), (1, 1, 4, 5), (2, 2, 7, 7), (1, 1, 1, 3)])
    def test_roundtrip_odd(self, shape):
        f = random_map(shape, seed=5)
        np.testing.assert_allclose(idwt2(dwt2(f)), f, atol=1e-10)

    def test_roundtrip_f32(self):
        f = random_map((2, 4, 16, 16), seed=6, dtype=np.float32)
        assert np.abs(idwt2(dwt2(f)) - f).max() <= 1e-5

    def test_bands_roundtrip_other_direction(self):
        shape = (1, 2, 3, 3)
        s = SubBands(ll=random_map(shape, 7), lh=random_map(shape, 8),
                     hl=random_map(shape, 9), hh=random_map(shape, 10))
        back = dwt2(idwt2(s))
        for orig, rec in zip(s.bands(), back.bands()):
            np.testing.assert_allclose(rec, orig, atol=1e-10)

    def test_inconsistent_band_shapes_rejected(self):
        z = np.zeros((1, 1, 2, 2))
        with pytest.raises(ContractViolationError):
            idwt2(SubBands(ll=z, lh=z, hl=z, hh=np.zeros((1, 1, 2, 3))))

    def test_inconsistent_pad_info_rejected(self):
        z = np.zeros((1, 1, 2, 2))
        with pytest.raises(ContractViolationError):
            idwt2(SubBands(ll=z, lh=z, hl=z, hh=z, pad_info=(9, 9)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3),
       h=st.integers(1, 9), w=st.integers(2, 9), seed=st.integers(0, 1000))
def test_roundtrip_property(n, c, h, w, seed):
    f = random_map((n, c, h, w), seed=seed)
    np.testing.assert_allclose(idwt2(dwt2(f)), f, atol=1e-10)


class TestBackward:
    def test_orthonormal_transpose(self):
        # J^T = J^{-1}: backpropagating dwt2's own output recovers the input.
        f = random_map((1, 2, 6, 6), seed=11)
        s = dwt2(f)
        np.testing.assert_allclose(dwt2_vjp(s), f, atol=1e-10)

    @pytest.mark.parametrize("shape", [(1, 1, 4, 4), (1, 2, 5, 4), (1, 1, 3, 3)])
    def test_dwt2_vjp_finite_diff(self, shape):
        u = dwt2(random_map(shape, seed=12))  # cotangent bands with matching shape
        err = finite_diff_vjp_check(
            lambda x: dwt2(x).bands(),
            lambda x, uu: dwt2_vjp(SubBands(*uu, pad_info=(shape[2], shape[3]))),
            random_map(shape, seed=13),
            tuple(b.copy() for b in u.bands()))
        assert err < 1e-6

    @pytest.mark.parametrize("hw", [(2, 2), (3, 3), (4, 3)])
    def test_idwt2_vjp_finite_diff(self, hw):
        h, w = hw
        bh, bw = (h + 1) // 2, (w + 1) // 2
        shapes = (1, 1, bh, bw)

        def fwd(flat):
            bands = flat.reshape(4, *shapes)
            return idwt2(SubBands(*bands, pad_info=(h, w)))

        def bwd(flat, u):
            cot = idwt2_vjp(u)
            return np.stack(cot.bands()).reshape(flat.shape)

        x = random_map((4, *shapes), seed=14).reshape(4 * bh * bw)
        u = random_map((1, 1, h, w), seed=15)
        err = finite_diff_vjp_check(lambda v: fwd(v), bwd, x, u)
        assert err < 1e-6

    def test_dispatcher(self):
        f = random_map((1, 1, 4, 4), seed=16)
        s = dwt2(f)
        np.testing.assert_allclose(wavelet_backward("analysis", s), f, atol=1e-10)
        cot = wavelet_backward("synthesis", f)
        assert cot.ll.shape == (1, 1, 2, 2)
        with pytest.raises(ContractViolationError):
            wavelet_backward("analysis", f)
        with pytest.raises(ContractViolationError):
            wavelet_backward("nonsense", f)
