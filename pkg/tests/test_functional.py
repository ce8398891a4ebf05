import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from escmisr import functional as F
from escmisr.tensor import DimensionError, Tensor
from escmisr.verification import conv2d_oracle, mhsa_oracle, scaled_max_error


def T(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype))


# -- pixel shuffle ----------------------------------------------------------

def test_pixel_shuffle_r1_is_identity(rng):
    x = rng.standard_normal((3, 4, 5))
    assert np.array_equal(F.pixel_shuffle(T(x), 1).data, x)


def test_pixel_shuffle_index_enumeration():
    x = np.arange(4.0).reshape(4, 1, 1)
    assert np.array_equal(F.pixel_shuffle(T(x), 2).data, [[[0, 1], [2, 3]]])


def test_pixel_shuffle_shape():
    assert F.pixel_shuffle(T(np.zeros((18, 4, 4))), 3).shape == (2, 12, 12)


def test_pixel_shuffle_rejects_bad_channels():
    with pytest.raises(DimensionError):
        F.pixel_shuffle(T(np.zeros((5, 2, 2))), 2)


def test_pixel_shuffle_formula(rng):
    c, r, h, w = 2, 3, 2, 3
    x = rng.standard_normal((c * r * r, h, w))
    y = F.pixel_shuffle(T(x), r).data
    for ci in range(c):
        for a in range(r):
            for b in range(r):
                assert np.array_equal(y[ci, a::r, b::r], x[ci * r * r + a * r + b])


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_pixel_shuffle_inverse_is_identity_permutation(c, r, h, w):
    x = np.arange(c * r * r * h * w, dtype=np.float64).reshape(c * r * r, h, w)
    y = F.pixel_shuffle(T(x), r)
    assert sorted(y.data.ravel()) == sorted(x.ravel())
    assert np.array_equal(F.pixel_unshuffle(y, r).data, x)


# -- norms and activations --------------------------------------------------

def test_layer_norm_of_constant_is_zero():
    out = F.layer_norm(T(np.full((3, 6), 4.2)))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, 0.0)


def test_fixed_points():
    assert F.gelu(T([0.0])).data[0] == 0.0
    assert F.relu(T([-1.0])).data[0] == 0.0


def test_gelu_matches_quadrature(rng):
    x = rng.uniform(-5, 5, size=25)
    pdf = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)  # noqa: E731
    ref = np.array([v * quad(pdf, -np.inf, v)[0] for v in x])
    assert np.max(np.abs(F.gelu(T(x)).data - ref)) < 1e-4


def test_batch_norm_modes(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    g, b = T(np.ones(3)), T(np.zeros(3))
    mean, var = np.zeros(3), np.ones(3)
    y = F.batch_norm(T(x), g, b, mean, var, training=True, momentum=1.0)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2, 3)))
    n = x.size // 3
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)) * n / (n - 1))
    z = F.batch_norm(T(x), g, b, mean, var, training=False)
    np.testing.assert_allclose(z.data, (x - mean.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + 1e-5))


def test_batch_norm_zero_variance_is_finite():
    y = F.batch_norm(T(np.ones((2, 2, 3, 3))), T(np.ones(2)), T(np.zeros(2)), np.zeros(2), np.ones(2), True)
    assert np.all(y.data == 0)


def test_mlp_composition(rng):
    x, w1, b1, w2, b2 = (rng.standard_normal(s) for s in [(5, 3), (3, 4), (4,), (4, 3), (3,)])
    out = F.mlp(T(x), T(w1), T(b1), T(w2), T(b2)).data
    h = x @ w1 + b1
    h = h * 0.5 * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    np.testing.assert_allclose(out, h @ w2 + b2, atol=1e-12)


def test_softmax_large_logits_stable():
    y = F.softmax(T([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(y.data, [[0.5, 0.5, 0.0]])


# -- conv and attention against loop oracles ----------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_conv2d_matches_loops(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 6, 7)).astype(np.float32)
    w = r.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = r.standard_normal(3).astype(np.float32)
    for stride, pad in ((1, 1), (2, 0), (1, 0)):
        got = F.conv2d(T(x, np.float32), T(w, np.float32), T(b, np.float32), stride=stride, padding=pad).data
        assert scaled_max_error(got, conv2d_oracle(x, w, b, stride, pad)) < 1e-5


def test_conv2d_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = F.conv2d(T(x), T(w), padding=1).data[0]
    assert np.array_equal(out, w[0, 0, ::-1, ::-1])


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv2d(T(np.zeros((2, 4, 4))), T(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_mhsa_matches_loops(heads, rng):
    t, c = 6, 8
    x = rng.standard_normal((t, c)).astype(np.float32)
    ws = [(rng.standard_normal((c, c)) / math.sqrt(c)).astype(np.float32) for _ in range(4)]
    bs = [rng.standard_normal(c).astype(np.float32) for _ in range(4)]
    bias = rng.standard_normal((heads, t, t)).astype(np.float32)
    got = F.mhsa(T(x, np.float32), *[T(w, np.float32) for w in ws], T(bias, np.float32), heads,
                 *[T(b, np.float32) for b in bs]).data
    assert scaled_max_error(got, mhsa_oracle(x, *ws, bias, heads, *bs)) < 1e-5


def test_mhsa_batched_equals_per_item(rng):
    x = rng.standard_normal((3, 5, 4))
    ws = [T(rng.standard_normal((4, 4))) for _ in range(4)]
    bias = T(rng.standard_normal((2, 5, 5)))
    batched = F.mhsa(T(x), *ws, bias, 2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], F.mhsa(T(x[i]), *ws, bias, 2).data, atol=1e-12)


def test_mhsa_rejects_wrong_bias():
    x = T(np.zeros((4, 4)))
    w = T(np.eye(4))
    with pytest.raises(DimensionError):
        F.mhsa(x, w, w, w, w, T(np.zeros((1, 3, 3))), 1)


def test_relative_index_table_size():
    pos = F.grid_positions(3, 4)
    idx = F.relative_index(pos, pos, 3, 4)
    assert idx.shape == (12, 12)
    assert idx.min() == 0 and idx.max() == (2 * 3 - 1) * (2 * 4 - 1) - 1
    # diagonal is the zero offset
    assert len(set(np.diag(idx))) == 1
