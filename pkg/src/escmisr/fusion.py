"""Multi-image spatial transformer fusion.

Each block derives message tokens from patches of every frame's feature map,
refines them with attention restricted to that frame, appends them to the
frame's pixel tokens and then runs one joint attention over the tokens of
all K frames. After the last block the message tokens are dropped and the K
feature maps are averaged.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .config import ModelConfig
from .layers import add_attention, add_layer_norm, add_mlp, attention, layer_norm, mlp
from .params import Initializer, ParamStore
from .tensor import DimensionError, Tensor, concat


def patch_positions(h: int, w: int, n: int) -> np.ndarray:
    """(row, col) of the first pixel of each contiguous row-major group of ``n`` pixels."""
    if (h * w) % n:
        raise DimensionError(f"n={n} does not divide {h}x{w}")
    first = np.arange(0, h * w, n)
    return np.stack([first // w, first % w], axis=1)


def make_message_tokens(tokens: Tensor, weight: Tensor, bias: Tensor | None, n: int) -> Tensor:
    """Project each group of ``n`` consecutive pixel tokens to one message token.

    ``tokens`` is (..., H*W, C); ``weight`` is (n*C, C). Returns (..., H*W/n, C).
    """
    *lead, hw, c = tokens.shape
    if hw % n:
        raise DimensionError(f"n={n} does not divide {hw} tokens")
    patches = tokens.reshape(*lead, hw // n, n * c)
    return F.linear(patches, weight, bias)


def _frame_layout(bias: Tensor, k: int, frame_bias: Tensor | None) -> Tensor:
    """Tile a per-frame (heads, T1, T1) bias over K frames -> (heads, K*T1, K*T1)."""
    heads, t1, _ = bias.shape
    b = bias.reshape(heads, 1, t1, 1, t1)
    if frame_bias is None:
        b = b.broadcast_to((heads, k, t1, k, t1))
    else:
        b = b + frame_bias.reshape(heads, k, 1, k, 1)
    return b.reshape(heads, k * t1, k * t1)


class MIST:
    """Stack of MISAB blocks followed by a mean over frames."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, init: Initializer, prefix: str = "fusion"):
        self.store = store
        self.cfg = cfg
        self.fc = fc = cfg.fusion
        self.prefix = p = prefix
        c, side, n = cfg.channels, cfg.size, fc.n
        self.hw = side * side
        self.n_msg = self.hw // n
        table = (2 * side - 1) ** 2

        img_pos = F.grid_positions(side, side)
        msg_pos = patch_positions(side, side, n)
        self._msg_index = F.relative_index(msg_pos, msg_pos, side, side)
        all_pos = np.concatenate([img_pos, msg_pos])
        kind = np.concatenate([np.zeros(self.hw, dtype=np.intp), np.ones(self.n_msg, dtype=np.intp)])
        spatial = F.relative_index(all_pos, all_pos, side, side)
        # one table row per (offset, query kind, key kind)
        self._misa_index = spatial * 4 + kind[:, None] * 2 + kind[None, :]

        for b in range(fc.n_blocks):
            q = f"{p}.{b}"
            store.add(f"{q}.msg_proj.w", init.dense(n * c, c))
            store.add(f"{q}.msg_proj.b", np.zeros(c))
            add_layer_norm(store, f"{q}.msg_ln", c)
            add_attention(store, init, f"{q}.msg_attn", c, cfg.qkv_bias)
            store.add(f"{q}.msg_rel_bias", init.small(fc.heads, table))
            add_layer_norm(store, f"{q}.misa_ln1", c)
            add_attention(store, init, f"{q}.misa_attn", c, cfg.qkv_bias)
            store.add(f"{q}.misa_rel_bias", init.small(fc.heads, table * 4))
            if fc.frame_bias_mode == "full-sequence":
                store.add(f"{q}.frame_bias", init.small(fc.heads, cfg.k, cfg.k))
            add_layer_norm(store, f"{q}.misa_ln2", c)
            add_mlp(store, init, f"{q}.misa_mlp", c, fc.mlp_ratio)

    # -- stage 1: per-image message tokens ---------------------------------
    def message_tokens(self, block: int, tokens: Tensor) -> Tensor:
        q = f"{self.prefix}.{block}"
        return make_message_tokens(tokens, self.store[f"{q}.msg_proj.w"], self.store[f"{q}.msg_proj.b"], self.fc.n)

    def message_attention(self, block: int, m: Tensor) -> Tensor:
        """``m + MHSA(LN(m))`` over the message tokens of each frame separately."""
        q, s = f"{self.prefix}.{block}", self.store
        bias = F.relative_bias(s[f"{q}.msg_rel_bias"], self._msg_index)
        return m + attention(s, f"{q}.msg_attn", layer_norm(s, f"{q}.msg_ln", m), bias, self.fc.heads)

    # -- stage 2: joint attention over all frames --------------------------
    def misa_bias(self, block: int, k: int) -> Tensor:
        q, s = f"{self.prefix}.{block}", self.store
        spatial = F.relative_bias(s[f"{q}.misa_rel_bias"], self._misa_index)
        frame = None
        if self.fc.frame_bias_mode == "full-sequence":
            if k != self.cfg.k:
                raise DimensionError(f"full-sequence bias built for K={self.cfg.k}, got {k} frames")
            frame = s[f"{q}.frame_bias"]
        return _frame_layout(spatial, k, frame)

    def misab(self, block: int, tokens: Tensor) -> Tensor:
        """One block on (B, K, H*W, C) pixel tokens; returns updated pixel tokens."""
        q, s = f"{self.prefix}.{block}", self.store
        bsz, k, hw, c = tokens.shape
        if hw != self.hw:
            raise DimensionError(f"fusion built for {self.hw} tokens per frame, got {hw}")
        msg = self.message_attention(block, self.message_tokens(block, tokens))
        fm = concat([tokens, msg], axis=2)
        t1 = hw + self.n_msg
        flat = fm.reshape(bsz, k * t1, c)
        y = flat + attention(s, f"{q}.misa_attn", layer_norm(s, f"{q}.misa_ln1", flat),
                             self.misa_bias(block, k), self.fc.heads)
        out = y + mlp(s, f"{q}.misa_mlp", layer_norm(s, f"{q}.misa_ln2", y))
        return out.reshape(bsz, k, t1, c)[:, :, :hw, :]

    def per_frame(self, f_e: Tensor) -> Tensor:
        """Run all blocks on (B, K, C, H, W); returns (B, K, H*W, C) before the frame mean."""
        bsz, k, c, h, w = f_e.shape
        tokens = f_e.reshape(bsz, k, c, h * w).transpose(0, 1, 3, 2)
        for b in range(self.fc.n_blocks):
            tokens = self.misab(b, tokens)
        return tokens

    def __call__(self, f_e: Tensor) -> Tensor:
        """(B, K, C, H, W) -> (B, C, H, W)."""
        bsz, k, c, h, w = f_e.shape
        fused = self.per_frame(f_e).mean(axis=1)
        return fused.transpose(0, 2, 1).reshape(bsz, c, h, w)


class SelfAttentionFusion:
    """Plain transformer blocks over the pixel tokens of all frames, then a frame mean."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, init: Initializer, prefix: str = "fusion"):
        self.store, self.cfg, self.prefix = store, cfg, prefix
        c, side = cfg.channels, cfg.size
        pos = F.grid_positions(side, side)
        self._index = F.relative_index(pos, pos, side, side)
        for b in range(cfg.fusion.n_blocks):
            q = f"{prefix}.{b}"
            add_layer_norm(store, f"{q}.ln1", c)
            add_attention(store, init, f"{q}.attn", c, cfg.qkv_bias)
            store.add(f"{q}.rel_bias", init.small(cfg.fusion.heads, (2 * side - 1) ** 2))
            add_layer_norm(store, f"{q}.ln2", c)
            add_mlp(store, init, f"{q}.mlp", c, cfg.fusion.mlp_ratio)

    def __call__(self, f_e: Tensor) -> Tensor:
        s = self.store
        bsz, k, c, h, w = f_e.shape
        t = f_e.reshape(bsz, k, c, h * w).transpose(0, 1, 3, 2).reshape(bsz, k * h * w, c)
        for b in range(self.cfg.fusion.n_blocks):
            q = f"{self.prefix}.{b}"
            bias = _frame_layout(F.relative_bias(s[f"{q}.rel_bias"], self._index), k, None)
            t = t + attention(s, f"{q}.attn", layer_norm(s, f"{q}.ln1", t), bias, self.cfg.fusion.heads)
            t = t + mlp(s, f"{q}.mlp", layer_norm(s, f"{q}.ln2", t))
        fused = t.reshape(bsz, k, h * w, c).mean(axis=1)
        return fused.transpose(0, 2, 1).reshape(bsz, c, h, w)


class MeanPoolFusion:
    """Average of the encoded frames; no parameters."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, init: Initializer, prefix: str = "fusion"):
        pass

    def __call__(self, f_e: Tensor) -> Tensor:
        return f_e.mean(axis=1)


FUSION_MODULES = {"misab": MIST, "self_attention": SelfAttentionFusion, "mean_pool": MeanPoolFusion}
