"""Desk-scale training experiments shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import FusionConfig, ModelConfig, TrainConfig
from .data import Sample, Scene, SynthParams, bicubic_clearest, make_sample, synthetic_dataset
from .metrics import cpsnr
from .model import EscMisr
from .train import evaluate_samples, fit, substream, validation_samples

log = logging.getLogger(__name__)

# degradation used for every desk experiment
DESK_SYNTH = SynthParams(shift_range=0.5, blur_sigma=1.0, noise_sigma=0.01, coverage=0.05, coverage_jitter=0.05,
                         n_frames=9)


def desk_scenes(n_train: int, n_val: int, seed: int = 42, hr_size: int = 384,
                synth: SynthParams = DESK_SYNTH) -> tuple[list[Scene], list[Scene]]:
    scenes = synthetic_dataset(n_train + n_val, synth, hr_size=hr_size, seed=seed)
    return scenes[:n_train], scenes[n_train:]


def corner_samples(scenes: list[Scene], k: int, crop: int) -> list[Sample]:
    """Four corner windows per scene, disjoint from the centre window used for model selection."""
    out = []
    for s in scenes:
        h, w = s.lr.shape[2:]
        for origin in ((0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)):
            out.append(make_sample(s, k, crop, origin=origin))
    return out


def bicubic_cpsnr(samples: list[Sample], r: int = 3) -> float:
    return float(np.mean([cpsnr(bicubic_clearest(s, r), s.hr, s.sm)[0] for s in samples]))


@dataclass
class EndToEndResult:
    model_cpsnr: float
    bicubic_cpsnr: float
    select_cpsnr: float
    select_bicubic: float
    best_epoch: int
    seconds: float
    history: list = field(default_factory=list)

    @property
    def margin(self) -> float:
        return self.model_cpsnr - self.bicubic_cpsnr


def run_end_to_end(n_train: int = 50, n_val: int = 10, crop: int = 32, k: int = 4, epochs: int = 30,
                   seed: int = 42, shuffle_t: int = 1, lr: float = 2e-3, batch_size: int = 4,
                   model_cfg: ModelConfig | None = None, out_dir=None) -> EndToEndResult:
    """Train the desk model and compare it with bicubic upsampling of the clearest frame.

    Model selection uses the centre window of each validation scene; the
    reported margin is measured on the four corner windows.
    """
    t0 = time.perf_counter()
    train, val = desk_scenes(n_train, n_val, seed)
    cfg = model_cfg or ModelConfig.desk(k=k, size=crop)
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, k=k, shuffle_t=shuffle_t, lr=lr, seed=seed, crop=crop)
    model = EscMisr(cfg, rng=substream(seed, "init"))
    result = fit(model, train, val, tcfg, out_dir=out_dir)
    model.params.load_state(result.params.state())
    held_out = corner_samples(val, k, crop)
    centre = validation_samples(val, k, crop)
    return EndToEndResult(
        model_cpsnr=evaluate_samples(model, held_out)[0],
        bicubic_cpsnr=bicubic_cpsnr(held_out, cfg.scale),
        select_cpsnr=result.best_cpsnr,
        select_bicubic=bicubic_cpsnr(centre, cfg.scale),
        best_epoch=result.best_epoch,
        seconds=time.perf_counter() - t0,
        history=result.history,
    )


def order_spread(model: EscMisr, samples: list[Sample], n_orders: int = 10, seed: int = 0) -> np.ndarray:
    """Mean validation cPSNR under ``n_orders`` random frame orders (one permutation per scene per order)."""
    rng = np.random.default_rng(seed)
    k = len(samples[0].stack)
    scores = []
    for _ in range(n_orders):
        orders = [rng.permutation(k) for _ in samples]
        scores.append(evaluate_samples(model, samples, orders)[0])
    return np.array(scores)


@dataclass
class ShuffleResult:
    std_shuffled: float
    std_fixed: float
    scores_shuffled: list
    scores_fixed: list
    seconds: float


def shuffle_model_config(crop: int = 16, k: int = 4) -> ModelConfig:
    return ModelConfig(k=k, size=crop, embed_dim=8, channels=8, cmt_heads=2,
                       fusion=FusionConfig(n_blocks=1, n=4, heads=2, frame_bias_mode="full-sequence"))


def run_shuffle_effect(n_train: int = 20, n_val: int = 10, crop: int = 16, k: int = 4, epochs: int = 10,
                       seed: int = 42, shuffled_t: int = 6, lr: float = 2e-3, n_orders: int = 10,
                       batch_size: int = 4) -> ShuffleResult:
    """Train twice from the same init (shuffle_t = ``shuffled_t`` and 0) and compare order sensitivity."""
    t0 = time.perf_counter()
    train, val = desk_scenes(n_train, n_val, seed)
    cfg = shuffle_model_config(crop, k)
    val_samples = validation_samples(val, k, crop)
    stds, scores = {}, {}
    for t in (shuffled_t, 0):
        model = EscMisr(cfg, rng=substream(seed, "init"))
        tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, k=k, shuffle_t=t, lr=lr, seed=seed, crop=crop)
        result = fit(model, train, val, tcfg)
        # the last epoch, not the best one: selection would reward order luck
        s = order_spread(model, val_samples, n_orders, seed)
        stds[t], scores[t] = float(s.std()), s.tolist()
        log.info("shuffle_t=%d: order cPSNR std %.5f dB (best val %.3f dB)", t, stds[t], result.best_cpsnr)
    return ShuffleResult(stds[shuffled_t], stds[0], scores[shuffled_t], scores[0], time.perf_counter() - t0)
