"""Configuration dataclasses for the model, fusion stack and training loop."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass

FRAME_BIAS_MODES = ("full-sequence", "frame-agnostic")
FUSION_BLOCKS = ("misab", "self_attention", "mean_pool")
SKIPS = ("none", "mean-bicubic")


@dataclass
class FusionConfig:
    n_blocks: int = 6
    n: int = 1  # pixels per message-token patch
    frame_bias_mode: str = "full-sequence"
    heads: int = 2
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.frame_bias_mode not in FRAME_BIAS_MODES:
            raise ValueError(f"frame_bias_mode must be one of {FRAME_BIAS_MODES}")


@dataclass
class ModelConfig:
    """Architectural hyperparameters.

    Defaults follow the full-size setting (K=24, CMT embedding 16, C=32,
    6 fusion blocks, one-pixel patches, x3 upscaling of 128x128 frames).
    """

    k: int = 24
    size: int = 128  # LR side length the attention bias tables are built for
    scale: int = 3
    input_mask: bool = False  # feed (image, QM) as two input channels
    embed_dim: int = 16
    channels: int = 32
    cmt_heads: int = 2
    mlp_ratio: float = 2.0
    qkv_bias: bool = True
    image_channels: int = 1
    ffc_ratio: float = 0.5
    ffc_blocks: int = 1
    fusion_block: str = "misab"
    bn_momentum: float = 0.1
    skip: str = "none"  # "mean-bicubic" adds a bicubic upsample of the frame mean to the output
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if self.fusion_block not in FUSION_BLOCKS:
            raise ValueError(f"fusion_block must be one of {FUSION_BLOCKS}")
        if self.skip not in SKIPS:
            raise ValueError(f"skip must be one of {SKIPS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if (self.size * self.size) % self.fusion.n:
            raise ValueError(f"patch size n={self.fusion.n} does not divide {self.size}x{self.size}")

    @property
    def in_channels(self) -> int:
        return 2 if self.input_mask else 1

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small CPU-friendly setting: 32x32 crops, K=4, C=16, 2 fusion blocks, skip to the frame mean."""
        fusion = overrides.pop("fusion", None) or FusionConfig(n_blocks=2, n=16, heads=1)
        base = dict(k=4, size=32, embed_dim=16, channels=16, cmt_heads=2, skip="mean-bicubic", fusion=fusion)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def gradcheck(cls, **overrides) -> "ModelConfig":
        """Configuration used by the end-to-end gradient check."""
        fusion = overrides.pop("fusion", None) or FusionConfig(n_blocks=1, n=1, heads=2)
        base = dict(k=4, size=16, embed_dim=8, channels=8, cmt_heads=2, fusion=fusion)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 4
    k: int = 24
    shuffle_t: int = 6
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 42
    crop: int | None = None
    masked_loss: bool = False
    patience: int | None = None  # early stop after this many epochs without improvement
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.shuffle_t < 0:
            raise ValueError("shuffle_t must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def to_dict(cfg) -> dict:
    return asdict(cfg)


def from_dict(cls, data: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "fusion" and isinstance(value, dict):
            value = from_dict(FusionConfig, value)
        kwargs[key] = value
    return cls(**kwargs)


def flatten(cfg, prefix: str = "") -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            out.update(flatten(value, prefix + f.name + "."))
        else:
            out[prefix + f.name] = value
    return out
