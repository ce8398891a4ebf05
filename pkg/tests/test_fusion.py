import itertools

import numpy as np
import pytest

from escmisr.config import FusionConfig, ModelConfig
from escmisr.fusion import MIST, MeanPoolFusion, SelfAttentionFusion, make_message_tokens, patch_positions
from escmisr.params import Initializer, ParamStore
from escmisr.tensor import DimensionError, Tensor
from escmisr.verification import layer_norm_oracle, mhsa_oracle, misab_oracle


def build(k=4, size=2, c=8, n=1, mode="frame-agnostic", blocks=1, heads=2, dtype=np.float64, seed=0, cls=MIST):
    cfg = ModelConfig(k=k, size=size, channels=c, embed_dim=c,
                      fusion=FusionConfig(n_blocks=blocks, n=n, heads=heads, frame_bias_mode=mode))
    store = ParamStore(dtype)
    rng = np.random.default_rng(seed)
    mist = cls(store, cfg, Initializer(rng))
    # larger random bias tables so bias handling is actually exercised
    for name, p in store.items():
        if "rel_bias" in name or name.endswith("frame_bias"):
            p.data = rng.standard_normal(p.shape).astype(dtype)
    return mist, store


def feats(k, c=8, size=2, seed=1, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((1, k, c, size, size)).astype(dtype)


def tokens_of(f):
    b, k, c, h, w = f.shape
    return f.reshape(b, k, c, h * w).transpose(0, 1, 3, 2)


# -- message tokens -------------------------------------------------------

def test_message_token_shape():
    t = Tensor(np.zeros((16, 8)))
    assert make_message_tokens(t, Tensor(np.zeros((8, 8))), None, 1).shape == (16, 8)


def test_identity_projection_returns_pixels(rng):
    x = rng.standard_normal((16, 8))
    assert np.array_equal(make_message_tokens(Tensor(x), Tensor(np.eye(8)), None, 1).data, x)


def test_patch_partition_oracle(rng):
    fmap = rng.standard_normal((8, 4, 4))  # C, H, W
    tokens = fmap.reshape(8, 16).T
    w, b = rng.standard_normal((32, 8)), rng.standard_normal(8)
    got = make_message_tokens(Tensor(tokens), Tensor(w), Tensor(b), 4).data
    assert got.shape == (4, 8)
    for j in range(4):
        row, col0 = divmod(j * 4, 4)
        patch = np.concatenate([fmap[:, row, col0 + i] for i in range(4)])
        np.testing.assert_allclose(got[j], patch @ w + b, atol=1e-12)


def test_patch_size_must_divide():
    with pytest.raises(DimensionError):
        make_message_tokens(Tensor(np.zeros((15, 2))), Tensor(np.zeros((8, 2))), None, 4)
    with pytest.raises(DimensionError):
        patch_positions(3, 3, 2)
    with pytest.raises(ValueError):
        ModelConfig(size=3, fusion=FusionConfig(n=2))


# -- stage 1 ----------------------------------------------------------------

def test_single_message_token(rng):
    mist, s = build(size=1)
    m = rng.standard_normal((1, 8))
    got = mist.message_attention(0, Tensor(m)).data
    q = "fusion.0.msg_attn"
    v = layer_norm_oracle(m, s["fusion.0.msg_ln.gamma"].data, s["fusion.0.msg_ln.beta"].data)
    v = v @ s[f"{q}.w_v"].data + s[f"{q}.b_v"].data
    np.testing.assert_allclose(got, m + v @ s[f"{q}.w_o"].data + s[f"{q}.b_o"].data, atol=1e-12)


def test_identical_message_tokens_stay_identical(rng):
    mist, s = build(size=4)
    s["fusion.0.msg_rel_bias"].data[...] = 0
    m = np.tile(rng.standard_normal(8), (16, 1))
    out = mist.message_attention(0, Tensor(m)).data
    assert np.allclose(out, out[0])


def test_message_attention_matches_loops(rng):
    mist, s = build(size=4, dtype=np.float32)
    m = rng.standard_normal((16, 8)).astype(np.float32)
    got = mist.message_attention(0, Tensor(m)).data
    d = {k: p.data.astype(np.float64) for k, p in s.items()}
    q = "fusion.0.msg_attn"
    bias = d["fusion.0.msg_rel_bias"][:, mist._msg_index]
    ref = m + mhsa_oracle(layer_norm_oracle(m, d["fusion.0.msg_ln.gamma"], d["fusion.0.msg_ln.beta"]),
                          d[f"{q}.w_q"], d[f"{q}.w_k"], d[f"{q}.w_v"], d[f"{q}.w_o"], bias, 2,
                          d[f"{q}.b_q"], d[f"{q}.b_k"], d[f"{q}.b_v"], d[f"{q}.b_o"])
    assert np.max(np.abs(got - ref)) < 1e-5


def test_stage_one_never_mixes_frames():
    mist, _ = build(k=3, size=2)
    t = tokens_of(feats(3))
    base = mist.message_attention(0, mist.message_tokens(0, Tensor(t))).data
    t2 = t.copy()
    t2[:, 1] = 0
    out = mist.message_attention(0, mist.message_tokens(0, Tensor(t2))).data
    assert np.array_equal(out[:, 0], base[:, 0]) and np.array_equal(out[:, 2], base[:, 2])
    assert not np.array_equal(out[:, 1], base[:, 1])


# -- MISAB ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["frame-agnostic", "full-sequence"])
@pytest.mark.parametrize("n", [1, 2])
def test_misab_matches_flat_oracle(mode, n):
    mist, _ = build(k=3, size=2, n=n, mode=mode, dtype=np.float32)
    t = tokens_of(feats(3, dtype=np.float32))
    got = mist.misab(0, Tensor(t)).data[0]
    assert np.max(np.abs(got - misab_oracle(mist, 0, t[0]))) < 1e-5


def test_misab_k1_is_a_transformer_block_over_one_image():
    mist, _ = build(k=1, size=2, mode="frame-agnostic")
    t = tokens_of(feats(1))
    np.testing.assert_allclose(mist.misab(0, Tensor(t)).data[0], misab_oracle(mist, 0, t[0]), atol=1e-10)


def test_misab_identical_images_identical_slices():
    mist, _ = build(k=2)
    f = feats(1)
    out = mist.misab(0, Tensor(tokens_of(np.concatenate([f, f], axis=1)))).data
    np.testing.assert_allclose(out[0, 0], out[0, 1], atol=1e-12)


def test_misab_rejects_wrong_token_count():
    mist, _ = build(k=2, size=2)
    with pytest.raises(DimensionError):
        mist.misab(0, Tensor(np.zeros((1, 2, 9, 8))))


def test_full_sequence_requires_built_k():
    mist, _ = build(k=4, mode="full-sequence")
    with pytest.raises(DimensionError):
        mist(Tensor(feats(3)))


# -- fused output -----------------------------------------------------------

def test_k1_fusion_is_post_block_feature():
    mist, _ = build(k=1, blocks=2)
    f = feats(1)
    fused = mist(Tensor(f)).data
    per = mist.per_frame(Tensor(f)).data[0, 0]
    np.testing.assert_allclose(fused[0], per.T.reshape(8, 2, 2), atol=1e-12)


def test_copies_fuse_like_a_single_frame():
    mist, _ = build(k=4, blocks=2)
    f = feats(1)
    single = mist(Tensor(f)).data
    copies = mist(Tensor(np.repeat(f, 4, axis=1))).data
    np.testing.assert_allclose(copies, single, atol=1e-10)


def test_frame_agnostic_permutation_sweep():
    mist, _ = build(k=4, blocks=2, dtype=np.float32)
    f = feats(4, dtype=np.float32)
    base = mist(Tensor(f)).data
    worst = max(np.max(np.abs(mist(Tensor(f[:, list(p)])).data - base)) for p in itertools.permutations(range(4)))
    assert worst < 1e-5


def test_full_sequence_equivariant_with_permuted_frame_bias():
    mist, s = build(k=3, mode="full-sequence", blocks=1)
    f = feats(3)
    base = mist.per_frame(Tensor(f)).data
    perm = [2, 0, 1]
    fb = s["fusion.0.frame_bias"].data
    s["fusion.0.frame_bias"].data = fb[:, perm][:, :, perm]
    out = mist.per_frame(Tensor(f[:, perm])).data
    np.testing.assert_allclose(out, base[:, perm], atol=1e-12)


def test_full_sequence_is_order_sensitive():
    mist, _ = build(k=3, mode="full-sequence")
    f = feats(3)
    assert not np.allclose(mist(Tensor(f)).data, mist(Tensor(f[:, [1, 2, 0]])).data)


@pytest.mark.parametrize("cls", [MIST, SelfAttentionFusion, MeanPoolFusion])
def test_message_tokens_never_leak(cls):
    mist, _ = build(k=2, size=4, n=4, cls=cls)
    assert mist(Tensor(feats(2, size=4))).shape == (1, 8, 4, 4)


def test_mean_pool_and_self_attention_are_permutation_invariant():
    f = feats(4)
    for cls in (SelfAttentionFusion, MeanPoolFusion):
        m, _ = build(k=4, cls=cls)
        np.testing.assert_allclose(m(Tensor(f[:, [3, 1, 0, 2]])).data, m(Tensor(f)).data, atol=1e-10)
