"""Train the desk-scale model on synthetic scenes and compare with bicubic upsampling.

    python3 scripts/desk_experiment.py --epochs 30 --out runs/desk
"""
import argparse
import json
import logging
from dataclasses import asdict

from escmisr.config import ModelConfig
from escmisr.experiments import run_end_to_end


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=int, default=50)
    p.add_argument("--val", type=int, default=10)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--shuffle-t", type=int, default=1)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--skip", default="mean-bicubic", choices=["none", "mean-bicubic"])
    p.add_argument("--out", default=None, help="directory for checkpoints and history.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_end_to_end(args.train, args.val, args.crop, args.k, args.epochs, args.seed, args.shuffle_t, args.lr,
                         args.batch_size, model_cfg=ModelConfig.desk(k=args.k, size=args.crop, skip=args.skip),
                         out_dir=args.out)
    print(json.dumps({k: v for k, v in asdict(res).items() if k != "history"}, indent=2))
    print(f"margin over bicubic: {res.margin:+.3f} dB")


if __name__ == "__main__":
    main()
