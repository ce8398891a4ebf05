"""End-to-end ESC-MISR network: CMT encoder, fusion stack, FFC decoder."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .data import bicubic_upsample
from .decoder import FFCDecoder
from .encoder import CMTEncoder
from .fusion import FUSION_MODULES
from .params import Initializer, ParamStore
from .tensor import DimensionError, Tensor, no_grad


class EscMisr:
    """Encoder-fusion-decoder super-resolution model over K low-resolution frames.

    Inputs are (B, K, C_in, h, w) with ``h == w == cfg.size``; outputs are
    (B, 1, r*h, r*w).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0, dtype=np.float32,
                 store: ParamStore | None = None):
        self.cfg = cfg
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        init = Initializer(rng)
        built = ParamStore(dtype)
        self.encoder = CMTEncoder(built, cfg, init)
        self.fusion = FUSION_MODULES[cfg.fusion_block](built, cfg, init)
        self.decoder = FFCDecoder(built, cfg, init)
        self.params = built
        if store is not None:
            self.load_params(store)

    @property
    def dtype(self):
        return self.params.dtype

    def load_params(self, store: ParamStore) -> None:
        self.params.load_state(store.state())

    def rebind(self, store: ParamStore) -> None:
        """Point every component at ``store`` (same names and shapes, possibly another dtype)."""
        self.params = store
        for part in (self.encoder, self.fusion, self.decoder):
            if hasattr(part, "store"):
                part.store = store

    def astype(self, dtype) -> "EscMisr":
        clone = object.__new__(EscMisr)
        clone.cfg = self.cfg
        clone.encoder = _copy_component(self.encoder)
        clone.fusion = _copy_component(self.fusion)
        clone.decoder = _copy_component(self.decoder)
        clone.rebind(self.params.astype(dtype))
        return clone

    def forward(self, lr, training: bool = True) -> Tensor:
        x = lr if isinstance(lr, Tensor) else Tensor(np.asarray(lr, dtype=self.dtype))
        if x.ndim != 5:
            raise DimensionError(f"expected (B, K, C_in, h, w) input, got {x.shape}")
        b, k, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise DimensionError(f"model expects {self.cfg.in_channels} input channels, got {c}")
        feats = self.encoder(x.reshape(b * k, c, h, w), training)
        feats = feats.reshape(b, k, feats.shape[1], h, w)
        fused = self.fusion(feats)
        out = self.decoder(fused, training)
        if self.cfg.skip == "mean-bicubic":
            out = out + Tensor(self.reference(x.data))
        return out

    __call__ = forward

    def reference(self, lr: np.ndarray) -> np.ndarray:
        """Bicubic upsample of the per-pixel frame mean, (B, C_img, r*h, r*w); order-independent in K."""
        mean = lr[:, :, :self.cfg.image_channels].mean(axis=1)
        r = self.cfg.scale
        return np.stack([np.stack([bicubic_upsample(ch, r) for ch in img]) for img in mean]).astype(self.dtype)

    def predict(self, lr: np.ndarray) -> np.ndarray:
        """Eval-mode forward on (B, K, C_in, h, w) without recording gradients."""
        with no_grad():
            return self.forward(lr, training=False).data

    def predict_tiled(self, frames: np.ndarray) -> np.ndarray:
        """Super-resolve a (K, C_in, H, W) stack of any size >= the tile size.

        The stack is covered by ``cfg.size`` tiles (the last row/column of tiles
        is aligned to the far edge) and the SR tiles are written back in order.
        """
        k, c, hh, ww = frames.shape
        t, r = self.cfg.size, self.cfg.scale
        if hh < t or ww < t:
            raise DimensionError(f"frames {hh}x{ww} smaller than model tile {t}")
        ys = _tile_origins(hh, t)
        xs = _tile_origins(ww, t)
        out = np.zeros((1, hh * r, ww * r), dtype=self.dtype)
        tiles = [(y, x) for y in ys for x in xs]
        for y, x in tiles:
            sr = self.predict(frames[None, :, :, y:y + t, x:x + t])[0]
            out[:, y * r:(y + t) * r, x * r:(x + t) * r] = sr
        return out


def _tile_origins(n: int, t: int) -> list[int]:
    origins = list(range(0, n - t + 1, t))
    if origins[-1] + t < n:
        origins.append(n - t)
    return origins


def _copy_component(part):
    clone = object.__new__(type(part))
    clone.__dict__.update(part.__dict__)
    return clone
