"""Command-line entry point.

    pipetrain [run] --schedule xpipe -K 4 -T 2 -N 128 --optimizer momentum --lr 1e-2 --out m.csv
    pipetrain run --mode analyze --schedule gpipe -K 4 -T 4
    pipetrain compare --schedules gpipe,pipedream,spectrain,xpipe -K 4 -T 1 --epochs 3
"""

import argparse
import dataclasses
import logging
import sys

from .experiment import PRESETS, ConfigError, ExperimentConfig, compare, run
from .runtime.schedule import SCHEDULES

log = logging.getLogger("pipetrain")


def _add_common(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="re-run from a JSON sidecar written by a previous run")
    p.add_argument("--stages", "-K", type=int)
    p.add_argument("--micro-batches", "-T", type=int)
    p.add_argument("--batch-size", "-N", type=int)
    p.add_argument("--optimizer", choices=["momentum", "rmsprop", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="'blobs' or 'idx:<images>,<labels>[;<val images>,<val labels>]'")
    p.add_argument("--model", choices=["mlp_small", "cnn_small", "logreg"])
    p.add_argument("--num-samples", type=int)
    p.add_argument("--mode", choices=["lockstep", "freerun", "analyze"])
    p.add_argument("--fwd-cost-us", type=float)
    p.add_argument("--bwd-cost-us", type=float)
    p.add_argument("--no-prediction", dest="prediction", action="store_false", default=None,
                   help="ablation: run xpipe with version difference forced to 0")
    p.add_argument("--out", help="metrics CSV path; a .json sidecar is written next to it")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="pipetrain", description="Pipeline-parallel training experiments")
    sub = parser.add_subparsers(dest="command")
    p_run = sub.add_parser("run", help="train (lockstep/freerun) or analyze one schedule")
    p_run.add_argument("--schedule", choices=SCHEDULES)
    _add_common(p_run)
    p_cmp = sub.add_parser("compare", help="run several schedules under identical settings")
    p_cmp.add_argument("--schedules", default="gpipe,pipedream,spectrain,xpipe",
                       help="comma-separated schedule names")
    _add_common(p_cmp)
    return parser


def resolve_config(args):
    """Sidecar or preset first, then explicit flags on top."""
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif args.preset:
        cfg = ExperimentConfig.from_preset(args.preset)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None and f.name not in ("preset",):
            overrides[f.name] = val
    if args.optimizer is not None:
        overrides["optimizer"] = args.optimizer
    return dataclasses.replace(cfg, **overrides)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "compare", "-h", "--help"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "compare":
            schedules = [s.strip() for s in args.schedules.split(",") if s.strip()]
            bad = [s for s in schedules if s not in SCHEDULES]
            if bad:
                raise ConfigError(f"unknown schedules {bad}")
            cfg.validate()
            compare(cfg, schedules, stream=sys.stdout)
            return 0
        code, _ = run(cfg, stream=sys.stdout)
        return code
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pipetrain: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"pipetrain: run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
