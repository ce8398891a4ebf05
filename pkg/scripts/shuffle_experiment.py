"""Compare frame-order sensitivity of models trained with and without frame shuffling.

    python3 scripts/shuffle_experiment.py --shuffle-t 6 --epochs 10
"""
import argparse
import json
import logging
from dataclasses import asdict

from escmisr.experiments import run_shuffle_effect


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--val", type=int, default=10)
    p.add_argument("--crop", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--shuffle-t", type=int, default=6)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--orders", type=int, default=10)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_shuffle_effect(args.train, args.val, args.crop, args.k, args.epochs, args.seed, args.shuffle_t,
                             args.lr, args.orders)
    print(json.dumps(asdict(res), indent=2))
    print(f"order std: shuffled {res.std_shuffled:.5f} dB vs fixed {res.std_fixed:.5f} dB")


if __name__ == "__main__":
    main()
