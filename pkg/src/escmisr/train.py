"""L2 training with the random frame-shuffle strategy, validation and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .data import Sample, Scene, collate, make_sample
from .encoder import FrameStack, pad_scene
from .metrics import EmptyMaskError, cpsnr, cssim
from .model import EscMisr
from .params import ParamStore
from .tensor import NonFiniteError, Tensor, as_tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_cpsnr", "val_cssim", "wall_seconds")
STREAMS = ("init", "data", "shuffle")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component, derived from one 64-bit seed."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), zlib.crc32(name.encode())]))


def shuffle_frames(stack: FrameStack, rng: np.random.Generator) -> FrameStack:
    return stack.permute(rng.permutation(len(stack)))


def loss_l2(sr: Tensor, hr, sm=None) -> Tensor:
    """Mean squared error, optionally restricted to clear target pixels."""
    hr = as_tensor(np.asarray(hr, dtype=sr.dtype))
    if hr.shape != sr.shape:
        raise ValueError(f"SR {sr.shape} and HR {hr.shape} differ")
    diff = sr - hr
    if sm is None:
        return (diff * diff).mean()
    mask = np.broadcast_to(np.asarray(sm, dtype=bool).reshape(sr.shape[0], *([1] * (sr.ndim - 3)), *sr.shape[-2:]),
                           sr.shape)
    count = int(mask.sum())
    if count == 0:
        log.warning("empty target mask; falling back to the unmasked mean")
        return (diff * diff).mean()
    m = Tensor(mask.astype(sr.dtype))
    return (diff * diff * m).sum() * (1.0 / count)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with optional (coupled) L2 weight decay; moments kept in the parameter dtype."""

    def __init__(self, store: ParamStore, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (step * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m:{n}": a for n, a in self.m.items()}
        out.update({f"adam.v:{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for n in self.m:
            self.m[n] = tensors[f"adam.m:{n}"].astype(self.m[n].dtype)
            self.v[n] = tensors[f"adam.v:{n}"].astype(self.v[n].dtype)


def grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    grad_norm: float
    samples: int


def enqueue(scenes: list[Scene], cfg: TrainConfig, data_rng: np.random.Generator,
            shuffle_rng: np.random.Generator) -> list[Sample]:
    """Training samples for one epoch: ``shuffle_t`` shuffled copies per scene (original order when 0)."""
    queue = []
    for scene in scenes:
        base = make_sample(scene, cfg.k, cfg.crop, data_rng)
        if cfg.shuffle_t == 0:
            queue.append(base)
            continue
        for _ in range(cfg.shuffle_t):
            queue.append(Sample(shuffle_frames(base.stack, shuffle_rng), base.hr, base.sm, base.scene_id, base.origin))
    order = data_rng.permutation(len(queue))
    return [queue[i] for i in order]


def train_epoch(model: EscMisr, scenes: list[Scene], cfg: TrainConfig, rngs: dict, opt: Adam) -> EpochStats:
    queue = enqueue(scenes, cfg, rngs["data"], rngs["shuffle"])
    losses, norms = [], []
    for start in range(0, len(queue), cfg.batch_size):
        chunk = queue[start:start + cfg.batch_size]
        batch = collate(chunk, model.cfg.input_mask)
        model.params.zero_grad()
        sr = model.forward(batch.lr.astype(model.dtype), training=True)
        loss = loss_l2(sr, batch.hr, batch.sm if cfg.masked_loss else None)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} on scenes {batch.scene_ids}")
        loss.backward()
        norms.append(grad_norm(model.params))
        opt.step()
        losses.append(value * len(chunk))
    n = len(queue)
    return EpochStats(loss=float(sum(losses) / max(n, 1)), grad_norm=float(np.mean(norms)) if norms else 0.0, samples=n)


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def _with_mask(stack: FrameStack, input_mask: bool) -> np.ndarray:
    frames = stack.frames
    if input_mask:
        frames = np.concatenate([frames, stack.masks[:, None].astype(frames.dtype)], axis=1)
    return frames


def predict_stack(model: EscMisr, stack: FrameStack) -> np.ndarray:
    """SR (1, rH, rW) for a K-frame stack; tiles when the frames exceed the model size."""
    frames = _with_mask(stack, model.cfg.input_mask).astype(model.dtype)
    if frames.shape[-1] == model.cfg.size and frames.shape[-2] == model.cfg.size:
        return model.predict(frames[None])[0]
    return model.predict_tiled(frames)


def predict_scene(model: EscMisr, scene: Scene, order=None) -> np.ndarray:
    stack = pad_scene(scene.lr, scene.clearance, model.cfg.k, masks=scene.qm)
    if order is not None:
        stack = stack.permute(order)
    return predict_stack(model, stack)


def validation_samples(scenes: list[Scene], k: int, crop: int | None) -> list[Sample]:
    """Centre windows of every validation scene; fixed for the whole run."""
    return [make_sample(s, k, crop, rng=None) for s in scenes if s.hr is not None]


def evaluate_samples(model: EscMisr, samples: list[Sample], orders=None) -> tuple[float, float]:
    """Mean (cPSNR, cSSIM) over samples, optionally permuting each stack by ``orders[i]``."""
    ps, ss = [], []
    for i, s in enumerate(samples):
        stack = s.stack if orders is None else s.stack.permute(orders[i])
        sr = predict_stack(model, stack)
        try:
            ps.append(cpsnr(sr, s.hr, s.sm)[0])
            ss.append(cssim(sr, s.hr, s.sm)[0])
        except EmptyMaskError:
            continue
    return (float(np.mean(ps)), float(np.mean(ss))) if ps else (float("nan"), float("nan"))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ParamStore
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_cpsnr: float = float("-inf")


def split_scenes(scenes: list[Scene], val_fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    idx = rng.permutation(len(scenes))
    n_val = int(round(val_fraction * len(scenes)))
    val = sorted(idx[:n_val])
    train = sorted(idx[n_val:])
    return [scenes[i] for i in train], [scenes[i] for i in val]


def training_meta(model: EscMisr, cfg: TrainConfig, epoch: int, rngs: dict, opt: Adam, best: dict) -> dict:
    return {
        "model_config": to_dict(model.cfg),
        "train_config": to_dict(cfg),
        "epoch": epoch,
        "adam_step": opt.t,
        "rng": {name: g.bit_generator.state for name, g in rngs.items()},
        "best": best,
    }


def save_training_state(path, model: EscMisr, cfg: TrainConfig, epoch: int, rngs: dict, opt: Adam,
                        best: dict) -> Path:
    tensors = dict(model.params.state())
    tensors.update(opt.state())
    return checkpoint.save(path, training_meta(model, cfg, epoch, rngs, opt, best), tensors)


def save_model(path, model: EscMisr, extra_meta: dict | None = None) -> Path:
    meta = {"model_config": to_dict(model.cfg), **(extra_meta or {})}
    return checkpoint.save(path, meta, model.params.state())


def load_model(path) -> EscMisr:
    meta, tensors = checkpoint.load(path)
    cfg = from_dict(ModelConfig, meta["model_config"])
    model = EscMisr(cfg, rng=0)
    model.params.load_state({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    return model


def _append_history(path: Path | None, row: dict) -> None:
    if path is None:
        return
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def fit(model: EscMisr, train_scenes: list[Scene], val_scenes: list[Scene], cfg: TrainConfig,
        out_dir=None, resume=None, epochs: int | None = None) -> FitResult:
    """Train for ``cfg.epochs`` (or ``epochs``) epochs, keeping the parameters with the best validation cPSNR.

    With ``out_dir`` set, ``last.ckpt`` / ``best.ckpt`` and ``history.csv`` are
    written there after every epoch. ``resume`` continues from a ``last.ckpt``.
    """
    if cfg.k != model.cfg.k:
        raise ValueError(f"train K={cfg.k} differs from model K={model.cfg.k}")
    total = cfg.epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    hist_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "history.csv"
        if resume is None and hist_path.exists():
            hist_path.unlink()
    rngs = {"data": substream(cfg.seed, "data"), "shuffle": substream(cfg.seed, "shuffle")}
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    start = 0
    best = {"epoch": 0, "cpsnr": None}
    best_params = model.params.copy()
    if resume is not None:
        meta, tensors = checkpoint.load(resume)
        model.params.load_state({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        opt.load_state(tensors, meta["adam_step"])
        for name, state in meta["rng"].items():
            rngs[name].bit_generator.state = state
        start = meta["epoch"]
        best = meta["best"]
        best_params = model.params.copy()
        if out is not None and (out / "best.ckpt").exists():
            _, bt = checkpoint.load(out / "best.ckpt")
            best_params.load_state(bt)
    val = validation_samples(val_scenes, cfg.k, cfg.crop)
    result = FitResult(params=best_params, best_epoch=best["epoch"],
                       best_cpsnr=best["cpsnr"] if best["cpsnr"] is not None else float("-inf"))
    stale = 0
    for epoch in range(start + 1, total + 1):
        t0 = time.perf_counter()
        stats = train_epoch(model, train_scenes, cfg, rngs, opt)
        vp, vs = evaluate_samples(model, val) if val else (float("nan"), float("nan"))
        row = {"epoch": epoch, "train_loss": stats.loss, "val_cpsnr": vp, "val_cssim": vs,
               "wall_seconds": round(time.perf_counter() - t0, 3)}
        result.history.append(row)
        improved = math.isfinite(vp) and vp > result.best_cpsnr
        if improved or not val:
            result.best_cpsnr, result.best_epoch = (vp if improved else result.best_cpsnr), epoch
            result.params = model.params.copy()
            best = {"epoch": epoch, "cpsnr": vp if math.isfinite(vp) else None}
            stale = 0
        else:
            stale += 1
        log.info("epoch %d loss %.6f val cPSNR %.3f dB cSSIM %.4f", epoch, stats.loss, vp, vs)
        _append_history(hist_path, row)
        if out is not None:
            try:
                save_training_state(out / "last.ckpt", model, cfg, epoch, rngs, opt, best)
                if improved or not val:
                    save_model(out / "best.ckpt", model, {"epoch": epoch, "val_cpsnr": best["cpsnr"]})
            except checkpoint.CheckpointError:
                log.error("checkpoint write failed after epoch %d; history flushed to %s", epoch, hist_path)
                raise
        if cfg.patience is not None and stale >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
            break
    return result
