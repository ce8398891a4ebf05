import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from escmisr.fft import fft, fft2, fft2_array, ifft2, ifft2_array
from escmisr.tensor import Tensor
from escmisr.verification import dft2_oracle


def test_constant_image_has_single_dc_coefficient():
    x = np.full((1, 5, 7), 0.75)
    z = fft2(Tensor(x)).numpy()
    assert z[0, 0, 0] == pytest.approx(0.75 * 35, abs=1e-9)
    rest = z.copy()
    rest[0, 0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-9


def test_roundtrip_8x8(rng):
    x = rng.standard_normal((1, 8, 8))
    back = ifft2(fft2(Tensor(x)), real=False).numpy()
    assert np.max(np.abs(back.real - x)) < 1e-9
    assert np.max(np.abs(back.imag)) < 1e-9


def test_matches_direct_dft_6x6(rng):
    x = rng.standard_normal((1, 6, 6))
    assert np.max(np.abs(fft2(Tensor(x)).numpy() - dft2_oracle(x))) < 1e-7


@pytest.mark.parametrize("h", range(2, 17))
def test_roundtrip_every_size(h, rng):
    for w in range(2, 17):
        x = rng.standard_normal((2, h, w))
        assert np.max(np.abs(ifft2_array(fft2_array(x)) - x)) < 1e-9


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 12, 13, 30, 64, 97])
def test_1d_against_numpy(n, rng):
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    np.testing.assert_allclose(fft(x), np.fft.fft(x), atol=1e-9 * max(n, 1))
    np.testing.assert_allclose(fft(x, inverse=True), np.fft.ifft(x), atol=1e-9)


@given(st.integers(2, 12), st.integers(2, 12), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity(h, w, a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((h, w)), r.standard_normal((h, w))
    lhs = fft2_array(a * x + b * y)
    rhs = a * fft2_array(x) + b * fft2_array(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_axis_argument(rng):
    x = rng.standard_normal((4, 6, 3))
    np.testing.assert_allclose(fft(x, axis=1), np.fft.fft(x, axis=1), atol=1e-10)
