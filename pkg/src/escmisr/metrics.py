"""Registration- and brightness-invariant quality metrics (cPSNR, cSSIM).

The HR target is cropped by ``border`` pixels on each side; the SR image is
scanned over every ``(2*border+1)^2`` window of the same size, a scalar bias
is removed over the clear pixels and the best window is kept.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

BORDER = 3
DB_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_SIGMA = 1.5
SSIM_SIZE = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


class EmptyMaskError(ValueError):
    """No clear pixel is left inside the evaluation crop."""


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single band, got {a.shape}")
        a = a[0]
    return a


def _prepare(sr, hr, sm, border):
    sr, hr = _as2d(sr), _as2d(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"SR {sr.shape} and HR {hr.shape} differ")
    sm = np.ones(hr.shape, dtype=bool) if sm is None else np.asarray(sm, dtype=bool).reshape(hr.shape)
    h, w = hr.shape
    ch, cw = h - 2 * border, w - 2 * border
    if ch < 1 or cw < 1:
        raise ValueError(f"image {h}x{w} too small for border {border}")
    hr_c = hr[border:border + ch, border:border + cw]
    m = sm[border:border + ch, border:border + cw]
    if not m.any():
        raise EmptyMaskError("no clear pixel inside the cropped target")
    return sr, hr_c, m, (ch, cw)


def _shifts(border: int):
    span = 2 * border + 1
    return [(u, v) for u in range(span) for v in range(span)]


def mse_to_db(mse: float) -> float:
    return DB_CAP if mse < MSE_FLOOR else float(-10.0 * math.log10(mse))


def shift_scores(sr, hr, sm=None, border: int = BORDER) -> dict:
    """cMSE and bias for every registration shift, keyed by (u, v)."""
    sr, hr_c, m, (ch, cw) = _prepare(sr, hr, sm, border)
    n = m.sum()
    out = {}
    for u, v in _shifts(border):
        diff = (hr_c - sr[u:u + ch, v:v + cw])[m]
        b = diff.sum() / n
        out[(u, v)] = (float(np.square(diff - b).sum() / n), float(b))
    return out


def cpsnr(sr, hr, sm=None, border: int = BORDER) -> tuple[float, tuple[int, int], float]:
    """Best (dB, (u, v), bias) over the shift grid; ties go to the first shift in row-major order."""
    scores = shift_scores(sr, hr, sm, border)
    best = min(scores, key=lambda s: scores[s][0])
    mse, b = scores[best]
    return mse_to_db(mse), best, b


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    a = ndimage.correlate1d(a, g, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(a, g, axis=1, mode="constant", cval=0.0)


def masked_ssim(x: np.ndarray, y: np.ndarray, m: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over clear pixels with mask-normalized Gaussian local statistics."""
    g = gaussian_window()
    mf = m.astype(np.float64)
    wsum = _blur(mf, g)
    valid = m & (wsum > 1e-12)
    safe = np.where(wsum > 1e-12, wsum, 1.0)
    mx = _blur(mf * x, g) / safe
    my = _blur(mf * y, g) / safe
    vx = _blur(mf * x * x, g) / safe - mx * mx
    vy = _blur(mf * y * y, g) / safe - my * my
    cxy = _blur(mf * x * y, g) / safe - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ssim = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(ssim[valid].mean())


def cssim(sr, hr, sm=None, border: int = BORDER) -> tuple[float, tuple[int, int]]:
    """Best masked SSIM of the bias-corrected SR window over the shift grid."""
    sr, hr_c, m, (ch, cw) = _prepare(sr, hr, sm, border)
    n = m.sum()
    best, best_shift = -np.inf, (0, 0)
    for u, v in _shifts(border):
        win = sr[u:u + ch, v:v + cw]
        b = (hr_c - win)[m].sum() / n
        s = masked_ssim(win + b, hr_c, m)
        if s > best:
            best, best_shift = s, (u, v)
    return float(best), best_shift


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SceneMetrics:
    scene_id: str
    cpsnr: float | None
    cssim: float | None
    u: int | None = None
    v: int | None = None
    b: float | None = None
    saturated: bool = False
    skipped: str | None = None


@dataclass
class MetricReport:
    per_scene: list[SceneMetrics] = field(default_factory=list)
    excluded: int = 0  # scenes without an HR target

    @property
    def evaluated(self) -> list[SceneMetrics]:
        return [s for s in self.per_scene if s.skipped is None]

    @property
    def mean_cpsnr(self) -> float:
        rows = self.evaluated
        return float(np.mean([r.cpsnr for r in rows])) if rows else float("nan")

    @property
    def mean_cssim(self) -> float:
        rows = self.evaluated
        return float(np.mean([r.cssim for r in rows])) if rows else float("nan")

    def summary(self) -> dict:
        return {
            "summary": True,
            "scenes": len(self.evaluated),
            "skipped": len(self.per_scene) - len(self.evaluated),
            "excluded_no_hr": self.excluded,
            "mean_cpsnr": self.mean_cpsnr,
            "mean_cssim": self.mean_cssim,
        }

    def lines(self) -> list[str]:
        rows = sorted(self.per_scene, key=lambda r: r.scene_id)
        out = [json.dumps(asdict(r), sort_keys=True) for r in rows]
        out.append(json.dumps(self.summary(), sort_keys=True))
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n")
        return path


def score_scene(scene_id: str, sr, hr, sm=None, border: int = BORDER) -> SceneMetrics:
    try:
        db, (u, v), b = cpsnr(sr, hr, sm, border)
        ss, _ = cssim(sr, hr, sm, border)
    except EmptyMaskError as exc:
        return SceneMetrics(scene_id, None, None, skipped=str(exc))
    return SceneMetrics(scene_id, db, ss, u, v, b, saturated=db >= DB_CAP)


def evaluate_dataset(predict: Callable, scenes: Iterable, border: int = BORDER) -> MetricReport:
    """Score ``predict(scene) -> (1, rH, rW)`` against every scene that carries an HR target."""
    report = MetricReport()
    for scene in scenes:
        if scene.hr is None:
            report.excluded += 1
            continue
        report.per_scene.append(score_scene(scene.scene_id, predict(scene), scene.hr, scene.sm, border))
    report.per_scene.sort(key=lambda r: r.scene_id)
    return report
