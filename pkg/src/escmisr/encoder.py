"""Per-frame CMT encoding and the clearest-frame padding rule."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import functional as F
from .config import ModelConfig
from .params import Initializer, ParamStore
from .layers import (add_attention, add_batch_norm, add_conv, add_layer_norm, add_mlp, attention, batch_norm,
                     conv, from_tokens, layer_norm, mlp, to_tokens)
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class FrameStack:
    """Exactly K frames of one scene after padding or selection.

    ``frames`` is (K, C_in, H, W); ``masks`` is (K, H, W) when available;
    ``source`` records the input index each frame was taken from.
    """

    frames: np.ndarray
    clearance: np.ndarray
    pad_flags: np.ndarray
    masks: np.ndarray | None = None
    source: np.ndarray | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]

    def permute(self, perm) -> "FrameStack":
        perm = np.asarray(perm)
        return replace(
            self,
            frames=self.frames[perm],
            clearance=self.clearance[perm],
            pad_flags=self.pad_flags[perm],
            masks=None if self.masks is None else self.masks[perm],
            source=None if self.source is None else self.source[perm],
        )


def clearest_index(clearance) -> int:
    """Index of the maximal clearance; ties go to the lowest index."""
    return int(np.argmax(np.asarray(clearance)))


def pad_scene(frames: np.ndarray, clearance, k: int, masks: np.ndarray | None = None) -> FrameStack:
    """Fix the frame count at ``k``.

    With at least ``k`` frames, the ``k`` clearest are kept in their original
    order. With fewer, the clearest frame is appended ``k - N`` times.
    """
    frames = np.asarray(frames)
    clearance = np.asarray(clearance, dtype=np.float64)
    n = frames.shape[0] if frames.ndim else 0
    if n == 0:
        raise ContractError("pad_scene needs at least one frame")
    if k < 1:
        raise ContractError("k must be >= 1")
    if clearance.shape != (n,):
        raise ContractError(f"clearance has {clearance.shape} entries for {n} frames")
    if n >= k:
        order = np.argsort(-clearance, kind="stable")[:k]
        idx = np.sort(order)
        pad = np.zeros(k, dtype=bool)
    else:
        best = clearest_index(clearance)
        idx = np.concatenate([np.arange(n), np.full(k - n, best)])
        pad = np.arange(k) >= n
    return FrameStack(
        frames=frames[idx],
        clearance=clearance[idx],
        pad_flags=pad,
        masks=None if masks is None else np.asarray(masks)[idx],
        source=idx,
    )


class CMTEncoder:
    """Stage-1 CMT: three conv/GeLU/BN stem layers, one CMT block, output conv."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, init: Initializer, prefix: str = "encoder"):
        self.store = store
        self.cfg = cfg
        self.prefix = p = prefix
        e, c = cfg.embed_dim, cfg.channels
        widths = [cfg.in_channels, e, e, e]
        for i in range(3):
            add_conv(store, init, f"{p}.stem{i}.conv", widths[i + 1], widths[i])
            add_batch_norm(store, f"{p}.stem{i}.bn", widths[i + 1])
        add_conv(store, init, f"{p}.cmtb.lpu", e, e)
        add_layer_norm(store, f"{p}.cmtb.ln1", e)
        add_attention(store, init, f"{p}.cmtb.attn", e, cfg.qkv_bias)
        side = cfg.size
        store.add(f"{p}.cmtb.rel_bias", init.small(cfg.cmt_heads, (2 * side - 1) ** 2))
        add_layer_norm(store, f"{p}.cmtb.ln2", e)
        add_mlp(store, init, f"{p}.cmtb.mlp", e, cfg.mlp_ratio)
        add_conv(store, init, f"{p}.out", c, e)
        pos = F.grid_positions(side, side)
        self._rel_index = F.relative_index(pos, pos, side, side)

    def stem(self, x: Tensor, training: bool = True) -> Tensor:
        """``BN(GeLU(Conv(x)))`` three times; spatial size preserved."""
        p = self.prefix
        for i in range(3):
            x = conv(self.store, f"{p}.stem{i}.conv", x)
            x = F.gelu(x)
            x = batch_norm(self.store, f"{p}.stem{i}.bn", x, training, self.cfg.bn_momentum)
        return x

    def cmtb(self, x: Tensor) -> Tensor:
        """Local-perception residual conv, then attention and MLP sub-blocks over H*W tokens."""
        p, s = self.prefix, self.store
        _, _, h, w = x.shape
        if (h, w) != (self.cfg.size, self.cfg.size):
            raise DimensionError(f"CMT block built for {self.cfg.size}x{self.cfg.size}, got {h}x{w}")
        x = x + conv(s, f"{p}.cmtb.lpu", x)
        t = to_tokens(x)
        bias = F.relative_bias(s[f"{p}.cmtb.rel_bias"], self._rel_index)
        t = t + attention(s, f"{p}.cmtb.attn", layer_norm(s, f"{p}.cmtb.ln1", t), bias, self.cfg.cmt_heads)
        t = t + mlp(s, f"{p}.cmtb.mlp", layer_norm(s, f"{p}.cmtb.ln2", t))
        return from_tokens(t, h, w)

    def __call__(self, frames: Tensor, training: bool = True) -> Tensor:
        """Encode (N, C_in, H, W) frames independently with shared weights -> (N, C, H, W)."""
        x = self.cmtb(self.stem(frames, training))
        return conv(self.store, f"{self.prefix}.out", x)

    def encode(self, stack: FrameStack, training: bool = False) -> Tensor:
        frames = Tensor(stack.frames.astype(self.store.dtype, copy=False))
        return self(frames, training)
