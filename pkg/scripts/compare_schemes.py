"""Train every learned scheme at the desk-scale point and print mean test sum rates next to the baselines."""

import argparse
import logging

from vflprecode.experiment import BASELINES, LEARNED, ExperimentConfig, run_experiment, summarize
from vflprecode.vfl import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--policy", default="full", choices=("paper", "full"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig(
        schemes=LEARNED + BASELINES,
        sensor_policy=args.policy,
        seeds=tuple(range(args.seeds)),
        n_samples=args.samples,
        train=TrainConfig(l_p=4, lr=1e-3, max_epochs=args.epochs),
        output_dir=args.out,
    )
    means = summarize(run_experiment(cfg))
    for (scheme, *_), rate in sorted(means.items(), key=lambda kv: -kv[1]):
        print(f"{scheme:12s} {rate:7.3f} bit/s/Hz")


if __name__ == "__main__":
    main()
