"""Command-line entry point: ``escmisr {train,eval,infer,synth,check}``.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 data error.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import FRAME_BIAS_MODES, FUSION_BLOCKS, SKIPS, FusionConfig, ModelConfig, TrainConfig
from .checkpoint import CheckpointError
from .data import (IngestionError, SynthParams, bicubic_clearest, builtin_rasters, load_dataset, load_scene,
                   random_hr_crops, save_scene, synthesize_scene, write_image)
from .metrics import evaluate_dataset

log = logging.getLogger("escmisr")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
PRESETS = ("full", "desk")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    band: str = "NIR"
    out: str = "runs/latest"


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _coerce(raw: str, current, key: str):
    text = raw.strip()
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if current is None or text.lower() == "none":
        if text.lower() == "none":
            return None
        try:
            return int(text)
        except ValueError as exc:
            raise UsageError(f"{key}: expected an integer or 'none', got {raw!r}") from exc
    try:
        return type(current)(text)
    except ValueError as exc:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from exc


def _apply(obj, values: dict[str, str], section: str):
    names = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in names or key == "fusion":
            raise UsageError(f"unknown config key '{section}.{key}'")
        updates[key] = _coerce(raw, getattr(obj, key), f"{section}.{key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{section}]: {exc}") from exc


def read_config(path, base: RunConfig) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    cfg = base
    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "model":
            cfg = replace(cfg, model=_apply(cfg.model, values, section))
        elif section == "fusion":
            cfg = replace(cfg, model=replace(cfg.model, fusion=_apply(cfg.model.fusion, values, section)))
        elif section == "train":
            cfg = replace(cfg, train=_apply(cfg.train, values, section))
        elif section == "run":
            for key, raw in values.items():
                if key not in ("data", "band", "out"):
                    raise UsageError(f"unknown config key 'run.{key}'")
                cfg = replace(cfg, **{key: None if raw.strip().lower() == "none" else raw.strip()})
        else:
            raise UsageError(f"unknown config section [{section}]")
    return cfg


def write_config(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser()
    parser["model"] = {f.name: str(getattr(cfg.model, f.name)) for f in fields(cfg.model) if f.name != "fusion"}
    parser["fusion"] = {f.name: str(getattr(cfg.model.fusion, f.name)) for f in fields(cfg.model.fusion)}
    parser["train"] = {f.name: str(getattr(cfg.train, f.name)) for f in fields(cfg.train)}
    parser["run"] = {"data": str(cfg.data), "band": cfg.band, "out": cfg.out}
    path = Path(path)
    with path.open("w") as fh:
        parser.write(fh)
    return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering ones given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI file with [model] [fusion] [train] [run] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--band", choices=("nir", "red"), type=str.lower)
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="escmisr", description="Multi-image super-resolution toolkit", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="fit a model on a scene directory")
    t.add_argument("--data")
    t.add_argument("--preset", choices=PRESETS, default="desk",
                   help="architecture preset; 'full' is the full-size network (default: desk)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--shuffle-t", dest="shuffle_t", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--masked-loss", dest="masked_loss", action="store_true", default=None)
    t.add_argument("--fusion-block", dest="fusion_block", choices=FUSION_BLOCKS)
    t.add_argument("--skip", choices=SKIPS, help="'mean-bicubic' predicts a correction to the upsampled frame mean")
    t.add_argument("--frame-bias-mode", dest="frame_bias_mode", choices=FRAME_BIAS_MODES)
    t.add_argument("--n-blocks", dest="n_blocks", type=int)
    t.add_argument("--patch", dest="n", type=int, help="pixels per message-token patch")
    t.add_argument("--resume", help="continue from a last.ckpt")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint or the bicubic baseline")
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("bicubic",))
    e.add_argument("--report", help="JSON Lines output (default: <out>/report.jsonl)")

    i = sub.add_parser("infer", parents=[common], help="super-resolve one scene to a 16-bit PNG")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--output", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic scenes in the on-disk layout")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--hr", help="directory of HR rasters (any Pillow-readable image)")
    src.add_argument("--builtin", action="store_true", help="use bundled public-domain rasters (default)")
    s.add_argument("--n-scenes", dest="n_scenes", type=int, default=10)
    s.add_argument("--hr-size", dest="hr_size", type=int, default=384)
    s.add_argument("--frames", type=int, default=9)
    s.add_argument("--shift", type=float, default=0.5)
    s.add_argument("--blur", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--coverage", type=float, default=0.05)
    s.add_argument("--coverage-jitter", dest="coverage_jitter", type=float, default=0.05)

    c = sub.add_parser("check", parents=[common], help="gradient checks and oracle comparisons")
    c.add_argument("--skip-model", action="store_true", help="omit the end-to-end model gradient check")
    c.add_argument("--inject-fault", dest="inject_fault", choices=("gelu",), help=argparse.SUPPRESS)
    return p


def resolve(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "preset", None) == "desk":
        cfg = replace(cfg, model=ModelConfig.desk(), train=replace(cfg.train, k=4, crop=32))
    if args.config:
        cfg = read_config(args.config, cfg)

    def override(section: str, key: str, value):
        nonlocal cfg
        if value is None:
            return
        if section == "train":
            old = getattr(cfg.train, key)
            cfg = replace(cfg, train=replace(cfg.train, **{key: value}))
        elif section == "model":
            old = getattr(cfg.model, key)
            cfg = replace(cfg, model=replace(cfg.model, **{key: value}))
        elif section == "fusion":
            old = getattr(cfg.model.fusion, key)
            cfg = replace(cfg, model=replace(cfg.model, fusion=replace(cfg.model.fusion, **{key: value})))
        else:
            old = getattr(cfg, key)
            cfg = replace(cfg, **{key: value})
        if args.config and old != value:
            log.info("%s.%s=%r from the config file overridden by the command line (%r)", section, key, old, value)

    try:
        override("train", "seed", args.seed)
        override("run", "out", args.out)
        override("run", "band", args.band.upper() if args.band else None)
        override("run", "data", getattr(args, "data", None))
        for key in ("epochs", "crop", "shuffle_t", "batch_size", "lr", "patience", "val_fraction", "masked_loss"):
            override("train", key, getattr(args, key, None))
        if getattr(args, "k", None) is not None:
            override("train", "k", args.k)
            override("model", "k", args.k)
        override("model", "fusion_block", getattr(args, "fusion_block", None))
        override("model", "skip", getattr(args, "skip", None))
        for key in ("frame_bias_mode", "n_blocks", "n"):
            override("fusion", key, getattr(args, key, None))
        # attention tables are sized for the training window
        if cfg.train.crop is not None and cfg.model.size != cfg.train.crop:
            override("model", "size", cfg.train.crop)
        if cfg.model.k != cfg.train.k:
            raise UsageError(f"model.k={cfg.model.k} and train.k={cfg.train.k} disagree")
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _scenes(cfg: RunConfig, root):
    if root is None:
        raise UsageError("--data is required")
    if not Path(root).is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    scenes = load_dataset(root, cfg.band)
    if not scenes:
        raise IngestionError(f"no scenes under {root}")
    return scenes


def cmd_train(args) -> int:
    from .model import EscMisr
    from .train import fit, save_model, split_scenes, substream

    cfg = resolve(args)
    scenes = _scenes(cfg, cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini")
    train_set, val_set = split_scenes(scenes, cfg.train.val_fraction, substream(cfg.train.seed, "split"))
    if not train_set:
        raise IngestionError("no training scenes left after the validation split")
    model = EscMisr(cfg.model, rng=substream(cfg.train.seed, "init"))
    log.info("training on %d scenes, validating on %d; %d parameters", len(train_set), len(val_set),
             model.params.num_parameters())
    result = fit(model, train_set, val_set, cfg.train, out_dir=out, resume=args.resume)
    model.params.load_state(result.params.state())
    save_model(out / "model.ckpt", model, {"best_epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}  val cPSNR {result.best_cpsnr:.3f} dB  -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args)
    scenes = _scenes(cfg, cfg.data)
    if args.baseline == "bicubic":
        predict = bicubic_clearest
    elif args.checkpoint:
        from .train import load_model, predict_scene

        model = load_model(args.checkpoint)
        predict = lambda scene: predict_scene(model, scene)  # noqa: E731
    else:
        raise UsageError("eval needs --checkpoint or --baseline bicubic")
    report = evaluate_dataset(predict, scenes)
    if not report.evaluated:
        log.error("no scene with an HR target (%d excluded)", report.excluded)
        return EXIT_DATA
    path = Path(args.report) if args.report else Path(cfg.out) / "report.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write(path)
    s = report.summary()
    print(f"{s['scenes']} scenes  cPSNR {s['mean_cpsnr']:.4f} dB  cSSIM {s['mean_cssim']:.5f}  "
          f"(excluded {s['excluded_no_hr']}, skipped {s['skipped']}) -> {path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import load_model, predict_scene

    model = load_model(args.checkpoint)
    scene = load_scene(args.scene)
    sr = predict_scene(model, scene)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, np.clip(sr[0], 0.0, 1.0))
    print(f"{scene.scene_id}: {sr.shape[1]}x{sr.shape[2]} -> {out}")
    return EXIT_OK


def _read_rasters(directory) -> list[np.ndarray]:
    paths = sorted(p for p in Path(directory).iterdir() if p.is_file())
    rasters = []
    for p in paths:
        try:
            img = Image.open(p)
        except OSError:
            continue
        arr = np.asarray(img.convert("I;16") if img.mode in ("I", "I;16", "I;16B") else img.convert("L"))
        scale = 65535.0 if arr.dtype == np.uint16 else 255.0
        rasters.append(arr.astype(np.float64) / scale)
    if not rasters:
        raise IngestionError(f"no readable rasters in {directory}")
    return rasters


def cmd_synth(args) -> int:
    cfg = resolve(args)
    seed = cfg.train.seed
    rasters = _read_rasters(args.hr) if args.hr else builtin_rasters()
    from .train import substream

    rng = substream(seed, "data")
    crops = random_hr_crops(rasters, args.n_scenes, args.hr_size, rng)
    root = Path(cfg.out) / cfg.band
    for i, crop in enumerate(crops):
        p = SynthParams(shift_range=args.shift, blur_sigma=args.blur, noise_sigma=args.noise,
                        coverage=args.coverage, coverage_jitter=args.coverage_jitter, n_frames=args.frames,
                        seed=int(rng.integers(2**31)))
        save_scene(synthesize_scene(crop, p, scene_id=f"imgset{i:04d}", band=cfg.band), root / f"imgset{i:04d}")
    print(f"{len(crops)} scenes -> {root}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .verification import run_all

    results = run_all(seed=args.seed or 0, fault=args.inject_fault, model_check=not args.skip_model)
    for r in results:
        print(r.line())
    failing = [r.name for r in results if not r.passed]
    if failing:
        print("FAILED: " + ", ".join(failing))
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synth": cmd_synth, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name in ("config", "seed", "out", "band", "threads"):
        setattr(args, name, getattr(args, name, None))
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"escmisr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, FileNotFoundError) as exc:
        print(f"escmisr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"escmisr: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
