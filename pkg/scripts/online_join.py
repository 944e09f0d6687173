"""Warm versus cold start when a third vehicle joins a trained two-vehicle fleet."""

import argparse
from pathlib import Path

from vflprecode.experiment import ExperimentConfig, run_online, write_online


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/online")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--samples", type=int, default=800)
    ap.add_argument("--pre-epochs", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--scheme", default="uni-pilot")
    args = ap.parse_args()
    cfg = ExperimentConfig(schemes=(args.scheme,), seeds=tuple(range(args.seeds)), n_samples=args.samples)
    runs = run_online(cfg, args.scheme, 2, args.pre_epochs, args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_online(out / "online.csv", runs)
    for r in runs:
        print(f"seed {r.seed} {r.start}: {r.epochs_to_95} epochs to 95%, final {r.trace[-1]:.3f}")


if __name__ == "__main__":
    main()
