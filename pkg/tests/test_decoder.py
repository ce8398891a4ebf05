import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escmisr.config import FusionConfig, ModelConfig
from escmisr.decoder import FFCDecoder, spectral_transform, split_channels, upsample_sr
from escmisr.model import EscMisr
from escmisr.params import Initializer, ParamStore
from escmisr.tensor import DimensionError, Tensor
from escmisr.verification import conv2d_oracle, ffc_oracle


def build(c=8, ratio=0.5, size=8, scale=3, dtype=np.float64, seed=0):
    cfg = ModelConfig(size=size, channels=c, ffc_ratio=ratio, scale=scale)
    store = ParamStore(dtype)
    return FFCDecoder(store, cfg, Initializer(np.random.default_rng(seed))), store


def spec_weights(rng, cg):
    return [Tensor(rng.standard_normal((2 * cg, 2 * cg, 1, 1))), Tensor(rng.standard_normal(2 * cg)),
            Tensor(rng.standard_normal((2 * cg, 2 * cg, 1, 1))), Tensor(rng.standard_normal(2 * cg))]


def test_spectral_zero_weights_is_identity(rng):
    x = rng.standard_normal((4, 8, 8))
    z = Tensor(np.zeros((8, 8, 1, 1)))
    assert np.array_equal(spectral_transform(Tensor(x), z, None, z, None).data, x)


def test_spectral_shape(rng):
    assert spectral_transform(Tensor(rng.standard_normal((4, 8, 8))), *spec_weights(rng, 4)).shape == (4, 8, 8)


def test_spectral_matches_composition(rng):
    x = rng.standard_normal((3, 6, 5)).astype(np.float32)
    w1, b1, w2, b2 = spec_weights(rng, 3)
    got = spectral_transform(Tensor(x), *(Tensor(t.data.astype(np.float32)) for t in (w1, b1, w2, b2))).data
    z = np.fft.fft2(x.astype(np.float64))
    h = np.maximum(conv2d_oracle(np.concatenate([z.real, z.imag]), w1.data, b1.data), 0)
    y = conv2d_oracle(h, w2.data, b2.data)
    ref = x + np.fft.ifft2(y[:3] + 1j * y[3:]).real
    assert np.max(np.abs(got - ref)) / max(1, np.abs(ref).max()) < 1e-5


def test_ffc_shape():
    dec, _ = build(c=8)
    assert dec.ffc(0, Tensor(np.random.default_rng(0).standard_normal((1, 8, 8, 8)))).shape == (1, 8, 8, 8)


def test_ffc_matches_composition_oracle(rng):
    dec, _ = build(c=6, dtype=np.float32)
    x = rng.standard_normal((2, 6, 5, 5)).astype(np.float32)
    got = dec.ffc(0, Tensor(x), training=True).data
    ref = ffc_oracle(dec, x)
    assert np.max(np.abs(got - ref)) / max(1, np.abs(ref).max()) < 1e-5


def test_ffc_path_isolation(rng):
    dec, s = build()
    for name in ("g2l", "l2g"):
        s[f"decoder.ffc0.{name}.w"].data[...] = 0
        s[f"decoder.ffc0.{name}.b"].data[...] = 0
    x = rng.standard_normal((1, 8, 6, 6))
    y = x.copy()
    y[:, 4:] = rng.standard_normal((1, 4, 6, 6))  # different global half
    a = dec.ffc(0, Tensor(x), training=False).data
    b = dec.ffc(0, Tensor(y), training=False).data
    assert np.array_equal(a[:, :4], b[:, :4])
    assert not np.array_equal(a[:, 4:], b[:, 4:])


def test_local_branch_shift_equivariance(rng):
    dec, s = build()
    for name in ("g2l", "l2g", "spec1", "spec2"):
        s[f"decoder.ffc0.{name}.w"].data[...] = 0
        s[f"decoder.ffc0.{name}.b"].data[...] = 0
    x = rng.standard_normal((1, 8, 10, 10))
    a = dec.ffc(0, Tensor(x), training=False).data
    b = dec.ffc(0, Tensor(np.roll(x, 1, axis=-1)), training=False).data
    shifted = np.roll(a, 1, axis=-1)
    # zero-padded 3x3 convs: columns next to the wrap seam see different padding
    np.testing.assert_allclose(b[..., 2:-1], shifted[..., 2:-1], atol=1e-12)
    np.testing.assert_allclose(b[:, 4:], shifted[:, 4:], atol=1e-12)  # global half passes straight through


@pytest.mark.parametrize("c,ratio", [(2, 0.1), (2, 0.9), (8, 0.0), (8, 1.0)])
def test_empty_branch_is_config_error(c, ratio):
    with pytest.raises(ValueError):
        split_channels(c, ratio)


def test_split_channels_default():
    assert split_channels(32, 0.5) == (16, 16)
    assert split_channels(8, 0.25) == (6, 2)


@pytest.mark.parametrize("shape,r,expect", [((9, 128, 128), 3, (1, 384, 384)), ((9, 32, 32), 3, (1, 96, 96)),
                                            ((1, 7, 5), 1, (1, 7, 5))])
def test_upsample_shapes(shape, r, expect):
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    assert upsample_sr(Tensor(np.zeros(shape, dtype=np.float32)), r, w).shape == expect


def test_upsample_rejects_bad_channels():
    with pytest.raises(DimensionError):
        upsample_sr(Tensor(np.zeros((8, 4, 4))), 3, Tensor(np.ones((1, 1, 3, 3))))


@settings(max_examples=8)
@given(st.integers(1, 3), st.sampled_from([3, 4, 6]), st.integers(1, 3), st.sampled_from([4, 8]),
       st.sampled_from(["misab", "self_attention", "mean_pool"]), st.booleans())
def test_model_output_shape(k, size, scale, c, block, input_mask):
    cfg = ModelConfig(k=k, size=size, scale=scale, channels=c, embed_dim=4, cmt_heads=1, fusion_block=block,
                      input_mask=input_mask, fusion=FusionConfig(n_blocks=1, n=1, heads=1))
    model = EscMisr(cfg, rng=0)
    lr = np.zeros((2, k, cfg.in_channels, size, size), dtype=np.float32)
    assert model.predict(lr).shape == (2, 1, scale * size, scale * size)


def test_gradient_reaches_every_decoder_leaf(rng):
    dec, s = build()
    out = dec(Tensor(rng.standard_normal((2, 8, 6, 6))), training=True)
    (out * out).mean().backward()
    for name, p in s.items():
        assert p.grad is not None and np.any(p.grad != 0), name
    assert np.abs(s["decoder.ffc0.spec1.w"].grad).sum() > 0


# -- optional skip to the upsampled frame mean ----------------------------

def skip_model(seed=0):
    cfg = ModelConfig(k=3, size=8, embed_dim=4, channels=4, cmt_heads=1, skip="mean-bicubic",
                      fusion=FusionConfig(n_blocks=1, n=4, heads=1, frame_bias_mode="frame-agnostic"))
    return EscMisr(cfg, rng=seed, dtype=np.float64)


def test_skip_reference_is_bicubic_of_frame_mean(rng):
    from escmisr.data import bicubic_upsample
    lr = rng.random((2, 3, 1, 8, 8))
    ref = skip_model().reference(lr)
    assert ref.shape == (2, 1, 24, 24)
    np.testing.assert_allclose(ref[1, 0], bicubic_upsample(lr[1, :, 0].mean(axis=0), 3), atol=1e-6)


def test_skip_model_starts_at_reference(rng):
    m = skip_model()
    lr = rng.random((1, 3, 1, 8, 8))
    np.testing.assert_array_equal(m.predict(lr), m.reference(lr))


def test_skip_reference_ignores_frame_order(rng):
    m = skip_model()
    lr = rng.random((1, 3, 1, 8, 8))
    np.testing.assert_allclose(m.reference(lr[:, [2, 0, 1]]), m.reference(lr), atol=1e-12)


def test_unknown_skip_rejected():
    with pytest.raises(ValueError, match="skip"):
        ModelConfig(skip="median")
