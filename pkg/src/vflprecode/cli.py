"""Command line entry point: ``vflprecode <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (a JSON object with the fields of
ExperimentConfig) and flags that override individual fields.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .experiment import (
    LEARNED,
    SCHEMES,
    ExperimentConfig,
    accounting_report,
    evaluate_run,
    load_config,
    run_experiment,
    run_online,
    save_config,
    summarize,
    write_online,
)
from .scene import generate_scene, save_scene


def _csv(cast):
    return lambda s: tuple(cast(x) for x in s.split(",") if x)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--schemes", type=_csv(str), help=f"comma list from {','.join(SCHEMES)}")
    p.add_argument("--K", dest="K_list", type=_csv(int), help="comma list of fleet sizes")
    p.add_argument("--snr", dest="snr_list", type=_csv(float), help="comma list of SNRs in dB")
    p.add_argument("--lp", dest="l_p_list", type=_csv(int), help="comma list of pilot lengths")
    p.add_argument("--seeds", type=_csv(int), help="comma list of seeds")
    p.add_argument("--samples", dest="n_samples", type=int)
    p.add_argument("--policy", dest="sensor_policy", choices=("paper", "full"))
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--loss-form", choices=("penalty", "paper-literal"))
    p.add_argument("--transport", choices=("inprocess", "socket"))
    p.add_argument("--threads", type=int, help="client worker threads")
    p.add_argument("--antennas", type=_csv(int), help="N_v,N_h")


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    top = {k: getattr(args, k) for k in
           ("output_dir", "schemes", "K_list", "snr_list", "l_p_list", "seeds", "n_samples", "sensor_policy")
           if getattr(args, k, None) is not None}
    train = {}
    for flag, field_name in (("epochs", "max_epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                             ("loss_form", "loss_form"), ("transport", "transport"), ("threads", "n_threads")):
        if getattr(args, flag, None) is not None:
            train[field_name] = getattr(args, flag)
    cfg = replace(cfg, **top, train=replace(cfg.train, **train))
    if getattr(args, "antennas", None):
        n_v, n_h = args.antennas
        cfg = replace(cfg, scene=replace(cfg.scene, n_v=n_v, n_h=n_h))
    return cfg


def cmd_gen_scene(args) -> int:
    cfg = build_config(args)
    scene = generate_scene(replace(cfg.scene, rng_seed=args.seed))
    save_scene(scene, args.path)
    print(f"wrote {len(scene.buildings)} buildings to {args.path}")
    return 0


def _print_summary(rows) -> None:
    for (scheme, K, snr, lp), rate in sorted(summarize(rows).items()):
        print(f"{scheme:12s} K={K} snr={snr:g}dB L_P={lp}  mean sum rate {rate:.4f} bit/s/Hz")


def cmd_train(args) -> int:
    cfg = build_config(args)
    if not cfg.learned:
        print(f"no learned scheme selected; choose from {','.join(LEARNED)}", file=sys.stderr)
        return 2
    _print_summary(run_experiment(cfg))
    return 0


def cmd_baseline(args) -> int:
    cfg = build_config(args)
    base = tuple(s for s in cfg.schemes if s not in LEARNED) or ("zf", "wmmse")
    _print_summary(run_experiment(replace(cfg, schemes=base)))
    return 0


def cmd_eval(args) -> int:
    _print_summary(evaluate_run(args.run))
    return 0


def cmd_online(args) -> int:
    cfg = build_config(args)
    runs = run_online(cfg, args.scheme, args.k_before, args.pre_epochs, args.online_epochs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    write_online(out / "online.csv", runs)
    for r in runs:
        print(f"seed {r.seed} {r.start:4s}: 95% of final sum rate after {r.epochs_to_95} epochs")
    return 0


def cmd_report(args) -> int:
    for a in accounting_report(args.run):
        print(f"{a.scheme:12s} K={a.K} seed={a.seed} epochs={a.epochs}  VFL {a.vfl_mb:.4f} MB  CL {a.cl_mb:.4f} MB")
    return 0


def cmd_show_config(args) -> int:
    print(json.dumps(asdict(build_config(args)), indent=2, sort_keys=True))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vflprecode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a world and save it as JSON")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("path", type=Path)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("train", help="train learned schemes (plus paired ZF/WMMSE)")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("baseline", help="score perfect-CSI baselines only")
    _add_common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("eval", help="re-score the checkpoints of a finished run")
    p.add_argument("run", type=Path)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("online", help="warm versus cold start after a vehicle joins")
    _add_common(p)
    p.add_argument("--scheme", default="uni-pilot", choices=LEARNED)
    p.add_argument("--k-before", type=int, default=2)
    p.add_argument("--pre-epochs", type=int, default=40)
    p.add_argument("--online-epochs", type=int, default=40)
    p.set_defaults(fn=cmd_online)

    p = sub.add_parser("report", help="VFL versus centralised data volume of a run")
    p.add_argument("run", type=Path)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("show-config", help="print the effective config as JSON")
    _add_common(p)
    p.set_defaults(fn=cmd_show_config)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
