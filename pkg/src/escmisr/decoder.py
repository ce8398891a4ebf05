"""Fast Fourier convolution decoder and pixel-shuffle upsampling."""
from __future__ import annotations

from . import functional as F
from .config import ModelConfig
from .fft import ComplexTensor, fft2, ifft2
from .layers import add_batch_norm, add_conv, batch_norm, conv
from .params import Initializer, ParamStore
from .tensor import Tensor, concat


def split_channels(c: int, ratio: float) -> tuple[int, int]:
    """(local, global) channel counts for a global fraction ``ratio``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"FFC split ratio must lie in (0, 1), got {ratio}")
    local = int(round((1.0 - ratio) * c))
    glob = c - local
    if local < 1 or glob < 1:
        raise ValueError(f"split ratio {ratio} leaves an empty branch for {c} channels")
    return local, glob


def spectral_transform(f_g: Tensor, w1: Tensor, b1: Tensor | None, w2: Tensor, b2: Tensor | None) -> Tensor:
    """``f_g + IFFT(Conv(ReLU(Conv(FFT(f_g)))))`` with 1x1 convs on stacked real/imag channels."""
    cg = f_g.shape[-3]
    z = fft2(f_g)
    spec = concat([z.real, z.imag], axis=-3)
    spec = F.conv2d(F.relu(F.conv2d(spec, w1, b1)), w2, b2)
    back = ComplexTensor(spec[..., :cg, :, :], spec[..., cg:, :, :])
    return f_g + ifft2(back)


class FFCDecoder:
    """FFC block(s), output conv, tail conv to r^2 * C_img channels, pixel shuffle, final conv."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, init: Initializer, prefix: str = "decoder"):
        self.store, self.cfg, self.prefix = store, cfg, prefix
        c = cfg.channels
        self.c_local, self.c_global = cl, cg = split_channels(c, cfg.ffc_ratio)
        for b in range(cfg.ffc_blocks):
            q = f"{prefix}.ffc{b}"
            add_conv(store, init, f"{q}.l2l", cl, cl)
            add_conv(store, init, f"{q}.g2l", cl, cg)
            add_conv(store, init, f"{q}.l2g", cg, cl)
            add_conv(store, init, f"{q}.spec1", 2 * cg, 2 * cg, k=1)
            add_conv(store, init, f"{q}.spec2", 2 * cg, 2 * cg, k=1)
            add_batch_norm(store, f"{q}.bn_l", cl)
            add_batch_norm(store, f"{q}.bn_g", cg)
        add_conv(store, init, f"{prefix}.out", c, c)
        r2c = cfg.scale * cfg.scale * cfg.image_channels
        add_conv(store, init, f"{prefix}.tail", r2c, c)
        # direct prediction starts near mid-grey; with a skip the correction starts at zero
        direct = cfg.skip == "none"
        add_conv(store, init, f"{prefix}.final", 1, cfg.image_channels, gain=0.1 if direct else 0.0,
                 bias=0.5 if direct else 0.0)

    def spectral(self, block: int, f_g: Tensor) -> Tensor:
        q, s = f"{self.prefix}.ffc{block}", self.store
        return spectral_transform(f_g, s[f"{q}.spec1.w"], s[f"{q}.spec1.b"], s[f"{q}.spec2.w"], s[f"{q}.spec2.b"])

    def ffc(self, block: int, x: Tensor, training: bool = True) -> Tensor:
        """One FFC block on (N, C, H, W); returns [X_l, X_g] concatenated on channels."""
        q, s = f"{self.prefix}.ffc{block}", self.store
        cl = self.c_local
        f_l, f_g = x[:, :cl], x[:, cl:]
        x_l = conv(s, f"{q}.l2l", f_l) + conv(s, f"{q}.g2l", f_g)
        x_g = conv(s, f"{q}.l2g", f_l) + self.spectral(block, f_g)
        x_l = F.relu(batch_norm(s, f"{q}.bn_l", x_l, training, self.cfg.bn_momentum))
        x_g = F.relu(batch_norm(s, f"{q}.bn_g", x_g, training, self.cfg.bn_momentum))
        return concat([x_l, x_g], axis=1)

    def decode(self, f_se: Tensor, training: bool = True) -> Tensor:
        """F_D = Conv(FFC(F_SE)) followed by the tail conv to r^2 * C_img channels."""
        x = f_se
        for b in range(self.cfg.ffc_blocks):
            x = self.ffc(b, x, training)
        x = conv(self.store, f"{self.prefix}.out", x)
        return conv(self.store, f"{self.prefix}.tail", x)

    def upsample(self, f_d: Tensor) -> Tensor:
        """Pixel shuffle by the scale factor, then a 3x3 conv to one band."""
        return conv(self.store, f"{self.prefix}.final", F.pixel_shuffle(f_d, self.cfg.scale))

    def __call__(self, f_se: Tensor, training: bool = True) -> Tensor:
        return self.upsample(self.decode(f_se, training))


def upsample_sr(f_d: Tensor, r: int, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Standalone form of :meth:`FFCDecoder.upsample` with explicit final-conv weights."""
    return F.conv2d(F.pixel_shuffle(f_d, r), weight, bias, padding=weight.shape[-1] // 2)

