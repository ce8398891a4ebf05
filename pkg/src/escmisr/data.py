"""PROBA-V style scene I/O, clearance, synthetic degradation and batching.

On-disk layout::

    <root>/<band>/imgset<id>/LR000.png, QM000.png, ..., HR.png, SM.png, clearance.npy

LR/HR are 16-bit grayscale PNGs scaled to [0, 1]; QM/SM are masks where any
non-zero pixel marks a reliable (clear) pixel.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .encoder import FrameStack, clearest_index, pad_scene
from .tensor import ContractError

log = logging.getLogger(__name__)

BANDS = ("NIR", "RED")
MAX_FRAMES = 35
_U16 = np.float32(65535.0)
_LR_RE = re.compile(r"^LR(\d+)\.png$")


class IngestionError(Exception):
    """A scene directory is missing files or holds inconsistent images."""


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    lr: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    qm: np.ndarray  # (N, H, W) bool, True = clear
    clearance: np.ndarray  # (N,)
    hr: np.ndarray | None = None  # (1, rH, rW)
    sm: np.ndarray | None = None  # (rH, rW) bool
    scene_id: str = "scene"
    band: str = "NIR"

    def __post_init__(self):
        n = self.lr.shape[0]
        if not 1 <= n <= MAX_FRAMES:
            raise ContractError(f"scene {self.scene_id}: {n} frames outside [1, {MAX_FRAMES}]")
        if self.lr.ndim != 4 or self.lr.shape[1] != 1:
            raise ContractError(f"scene {self.scene_id}: LR frames must be (N, 1, H, W), got {self.lr.shape}")
        if self.qm.shape != (n,) + self.lr.shape[2:]:
            raise ContractError(f"scene {self.scene_id}: QM shape {self.qm.shape} does not match LR")
        if np.shape(self.clearance) != (n,):
            raise ContractError(f"scene {self.scene_id}: clearance length differs from frame count")
        if self.hr is not None and self.sm is not None and self.sm.shape != self.hr.shape[1:]:
            raise ContractError(f"scene {self.scene_id}: SM shape {self.sm.shape} does not match HR")

    @property
    def n_frames(self) -> int:
        return self.lr.shape[0]

    @property
    def has_hr(self) -> bool:
        return self.hr is not None


def compute_clearance(qm: np.ndarray) -> float:
    """Fraction of clear pixels in a quality mask."""
    qm = np.asarray(qm, dtype=bool)
    return float(qm.mean()) if qm.size else 0.0


def quantize16(x: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values onto the 16-bit grid, exactly as a PNG round trip would."""
    q = np.round(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return q.astype(np.float32) / _U16


# ---------------------------------------------------------------------------
# PNG / npy I/O
# ---------------------------------------------------------------------------

def read_image(path: Path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        return arr.astype(np.float32) / _U16
    if arr.dtype == np.uint8:
        log.warning("%s is 8-bit; 16-bit PNG is expected", path)
        return arr.astype(np.float32) / np.float32(255.0)
    raise IngestionError(f"{path}: unsupported pixel type {arr.dtype}")


def read_mask(path: Path) -> np.ndarray:
    return np.array(Image.open(path)) != 0


def write_image(path: Path, img: np.ndarray) -> None:
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def _band_of(path: Path) -> str:
    name = path.parent.name.upper()
    return name if name in BANDS else "NIR"


def load_scene(dir_path) -> Scene:
    path = Path(dir_path)
    if not path.is_dir():
        raise IngestionError(f"{path} is not a directory")
    indexed = sorted((int(m.group(1)), p) for p in path.iterdir() if (m := _LR_RE.match(p.name)))
    if not indexed:
        raise IngestionError(f"{path}: no LR frames")
    frames, masks = [], []
    for idx, lr_path in indexed:
        qm_path = lr_path.with_name(lr_path.name.replace("LR", "QM", 1))
        if not qm_path.exists():
            raise IngestionError(f"{path}: {lr_path.name} has no matching {qm_path.name}")
        img, qm = read_image(lr_path), read_mask(qm_path)
        if img.shape != qm.shape:
            raise IngestionError(f"{path}: {lr_path.name} {img.shape} vs {qm_path.name} {qm.shape}")
        if frames and img.shape != frames[0].shape:
            raise IngestionError(f"{path}: {lr_path.name} size {img.shape} differs from {frames[0].shape}")
        frames.append(img)
        masks.append(qm)
    lr = np.stack(frames)[:, None]
    qm = np.stack(masks)
    clearance = np.array([compute_clearance(m) for m in qm])
    npy = path / "clearance.npy"
    if npy.exists():
        override = np.load(npy)
        if override.shape != (len(frames),):
            raise IngestionError(f"{npy}: {override.shape} entries for {len(frames)} frames")
        clearance = override.astype(np.float64)
    hr = sm = None
    if (path / "HR.png").exists():
        hr = read_image(path / "HR.png")[None]
        sm_path = path / "SM.png"
        sm = read_mask(sm_path) if sm_path.exists() else np.ones(hr.shape[1:], dtype=bool)
        if sm.shape != hr.shape[1:]:
            raise IngestionError(f"{path}: SM {sm.shape} vs HR {hr.shape[1:]}")
        if hr.shape[1] % lr.shape[2] or hr.shape[2] % lr.shape[3]:
            raise IngestionError(f"{path}: HR {hr.shape[1:]} is not a multiple of LR {lr.shape[2:]}")
    return Scene(lr=lr, qm=qm, clearance=clearance, hr=hr, sm=sm, scene_id=path.name, band=_band_of(path))


def save_scene(scene: Scene, dir_path) -> Path:
    """Write ``scene`` in the on-disk layout, replacing any previous files there."""
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    for old in list(path.glob("LR*.png")) + list(path.glob("QM*.png")):
        old.unlink()
    for i in range(scene.n_frames):
        write_image(path / f"LR{i:03d}.png", scene.lr[i, 0])
        write_mask(path / f"QM{i:03d}.png", scene.qm[i])
    if scene.hr is not None:
        write_image(path / "HR.png", scene.hr[0])
        write_mask(path / "SM.png", scene.sm if scene.sm is not None else np.ones(scene.hr.shape[1:], bool))
    np.save(path / "clearance.npy", np.asarray(scene.clearance, dtype="<f8"))
    return path


def scene_dirs(root, band: str = "NIR") -> list[Path]:
    base = Path(root) / band.upper()
    if not base.is_dir():
        base = Path(root)
    return sorted(p for p in base.iterdir() if p.is_dir() and any(_LR_RE.match(f.name) for f in p.iterdir()))


def load_dataset(root, band: str = "NIR") -> list[Scene]:
    return [load_scene(p) for p in scene_dirs(root, band)]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthParams:
    scale: int = 3
    shift_range: float = 0.5  # max per-frame shift, in LR pixels (uniform in +-range)
    blur_sigma: float = 1.0  # Gaussian PSF sigma, in HR pixels
    noise_sigma: float = 0.01
    coverage: float = 0.1  # fraction of cloudy pixels per frame
    coverage_jitter: float = 0.0  # per-frame coverage drawn from coverage +- jitter
    cloud_scale: float = 4.0  # smoothness of cloud blobs, in LR pixels
    n_frames: int = 9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.coverage < 1.0:
            raise ValueError("coverage must lie in [0, 1)")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")


def area_downsample(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(h // r, r, w // r, r).mean(axis=(1, 3))


def cloud_mask(shape: tuple, coverage: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Blob-shaped mask with exactly ``round(coverage * size)`` cloudy (True) pixels."""
    n_cloud = int(round(coverage * shape[0] * shape[1]))
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    mask = np.zeros(shape, dtype=bool)
    if n_cloud:
        order = np.argsort(field_, axis=None, kind="stable")[::-1][:n_cloud]
        mask.flat[order] = True
    return mask


def degrade(hr: np.ndarray, p: SynthParams, rng: np.random.Generator, shift=(0.0, 0.0)) -> np.ndarray:
    """Shift, blur, area-downsample and add noise to a 2-D HR image."""
    img = np.asarray(hr, dtype=np.float64)
    if shift[0] or shift[1]:
        img = ndimage.shift(img, (shift[0] * p.scale, shift[1] * p.scale), order=3, mode="reflect")
    if p.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, p.blur_sigma, mode="reflect")
    lr = area_downsample(img, p.scale)
    if p.noise_sigma > 0:
        lr = lr + rng.normal(0.0, p.noise_sigma, size=lr.shape)
    return lr


def synthesize_scene(hr: np.ndarray, p: SynthParams, scene_id: str = "synth", band: str = "NIR") -> Scene:
    """Generate LR frames, QMs and clearances from one HR image; deterministic in ``p.seed``."""
    hr2 = np.asarray(hr, dtype=np.float64)
    if hr2.ndim == 3:
        hr2 = hr2[0]
    if hr2.shape[0] % p.scale or hr2.shape[1] % p.scale:
        raise ContractError(f"HR {hr2.shape} not divisible by scale {p.scale}")
    rng = np.random.default_rng(p.seed)
    hr_q = quantize16(hr2)
    frames, masks = [], []
    for _ in range(p.n_frames):
        shift = rng.uniform(-p.shift_range, p.shift_range, size=2) if p.shift_range > 0 else (0.0, 0.0)
        lr = degrade(hr_q, p, rng, tuple(shift))
        cov = p.coverage
        if p.coverage_jitter > 0:
            cov = float(np.clip(cov + rng.uniform(-p.coverage_jitter, p.coverage_jitter), 0.0, 0.95))
        cloudy = cloud_mask(lr.shape, cov, p.cloud_scale, rng)
        lr = np.where(cloudy, 0.0, lr)
        frames.append(quantize16(lr))
        masks.append(~cloudy)
    qm = np.stack(masks)
    return Scene(
        lr=np.stack(frames)[:, None],
        qm=qm,
        clearance=np.array([compute_clearance(m) for m in qm]),
        hr=hr_q[None],
        sm=np.ones(hr_q.shape, dtype=bool),
        scene_id=scene_id,
        band=band,
    )


_RASTERS = ("camera", "astronaut", "moon", "brick", "grass", "gravel", "coffee", "rocket", "hubble_deep_field")


def builtin_rasters() -> list[np.ndarray]:
    """Public-domain / CC0 grayscale rasters bundled with scikit-image, scaled to [0, 1]."""
    from skimage import data as skdata
    from skimage.color import rgb2gray

    out = []
    for name in _RASTERS:
        img = getattr(skdata, name)()
        img = rgb2gray(img) if img.ndim == 3 else img.astype(np.float64) / 255.0
        out.append(np.asarray(img, dtype=np.float64))
    return out


def random_hr_crops(rasters: list[np.ndarray], n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``n`` random ``size`` x ``size`` crops with random flips and quarter turns."""
    usable = [r for r in rasters if min(r.shape) >= size]
    if not usable:
        raise ContractError(f"no raster is at least {size}x{size}")
    crops = []
    for _ in range(n):
        src = usable[rng.integers(len(usable))]
        y = rng.integers(src.shape[0] - size + 1)
        x = rng.integers(src.shape[1] - size + 1)
        tile = np.rot90(src[y:y + size, x:x + size], k=int(rng.integers(4)))
        if rng.integers(2):
            tile = tile[:, ::-1]
        crops.append(np.ascontiguousarray(tile))
    return crops


def synthetic_dataset(n_scenes: int, p: SynthParams, hr_size: int = 384, seed: int = 0,
                      band: str = "NIR", rasters: list[np.ndarray] | None = None) -> list[Scene]:
    rng = np.random.default_rng(seed)
    crops = random_hr_crops(rasters if rasters is not None else builtin_rasters(), n_scenes, hr_size, rng)
    scenes = []
    for i, crop in enumerate(crops):
        sp = SynthParams(**{**p.__dict__, "seed": int(rng.integers(2**31))})
        scenes.append(synthesize_scene(crop, sp, scene_id=f"imgset{i:04d}", band=band))
    return scenes


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One scene reduced to K frames and (optionally) cropped."""

    stack: FrameStack
    hr: np.ndarray | None
    sm: np.ndarray | None
    scene_id: str
    origin: tuple[int, int] = (0, 0)


@dataclass
class Batch:
    lr: np.ndarray  # (B, K, C_in, h, w)
    qm: np.ndarray  # (B, K, h, w)
    hr: np.ndarray | None  # (B, 1, rh, rw)
    sm: np.ndarray | None  # (B, rh, rw)
    pad_flags: np.ndarray
    clearance: np.ndarray
    scene_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.lr.shape[0]


def crop_origin(size: tuple[int, int], crop: int, rng: np.random.Generator | None) -> tuple[int, int]:
    h, w = size
    if crop > h or crop > w:
        raise ContractError(f"crop {crop} larger than frame {h}x{w}")
    if rng is None:
        return (h - crop) // 2, (w - crop) // 2
    return int(rng.integers(h - crop + 1)), int(rng.integers(w - crop + 1))


def make_sample(scene: Scene, k: int, crop: int | None = None, rng: np.random.Generator | None = None,
                origin: tuple[int, int] | None = None) -> Sample:
    """Pad/select to K frames and cut aligned LR/HR windows.

    Without ``rng`` (and without an explicit ``origin``) the window is centred.
    """
    stack = pad_scene(scene.lr, scene.clearance, k, masks=scene.qm)
    hr, sm = scene.hr, scene.sm
    y = x = 0
    if crop is not None:
        y, x = origin if origin is not None else crop_origin(scene.lr.shape[2:], crop, rng)
        stack = FrameStack(
            frames=stack.frames[:, :, y:y + crop, x:x + crop],
            clearance=stack.clearance,
            pad_flags=stack.pad_flags,
            masks=stack.masks[:, y:y + crop, x:x + crop],
            source=stack.source,
        )
        if hr is not None:
            r = hr.shape[1] // scene.lr.shape[2]
            hr = hr[:, r * y:r * (y + crop), r * x:r * (x + crop)]
            sm = sm[r * y:r * (y + crop), r * x:r * (x + crop)] if sm is not None else None
    return Sample(stack=stack, hr=hr, sm=sm, scene_id=scene.scene_id, origin=(y, x))


def collate(samples: list[Sample], input_mask: bool = False) -> Batch:
    lr = np.stack([s.stack.frames for s in samples])
    qm = np.stack([s.stack.masks for s in samples])
    if input_mask:
        lr = np.concatenate([lr, qm[:, :, None].astype(lr.dtype)], axis=2)
    has_hr = all(s.hr is not None for s in samples)
    return Batch(
        lr=lr,
        qm=qm,
        hr=np.stack([s.hr for s in samples]) if has_hr else None,
        sm=np.stack([s.sm for s in samples]) if has_hr else None,
        pad_flags=np.stack([s.stack.pad_flags for s in samples]),
        clearance=np.stack([s.stack.clearance for s in samples]),
        scene_ids=[s.scene_id for s in samples],
    )


def batch_scenes(scenes: list[Scene], k: int, crop: int | None = None, rng: np.random.Generator | None = None,
                 input_mask: bool = False) -> Batch:
    return collate([make_sample(s, k, crop, rng) for s in scenes], input_mask)


# ---------------------------------------------------------------------------
# reference upsampler
# ---------------------------------------------------------------------------

def bicubic_upsample(img: np.ndarray, r: int) -> np.ndarray:
    """Bicubic (a = -0.5) interpolation of a 2-D image by an integer factor."""
    h, w = img.shape
    im = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    return np.asarray(im.resize((w * r, h * r), Image.BICUBIC), dtype=np.float32)


def bicubic_clearest(sample_or_scene, r: int = 3) -> np.ndarray:
    """Bicubic upsampling of the clearest frame; returns (1, rH, rW)."""
    if isinstance(sample_or_scene, Sample):
        stack = sample_or_scene.stack
        frames, clearance = stack.frames, stack.clearance
    else:
        frames, clearance = sample_or_scene.lr, sample_or_scene.clearance
    return bicubic_upsample(frames[clearest_index(clearance), 0], r)[None]
