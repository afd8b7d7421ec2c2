"""Command-line entry point: ``rsm-mappo`` / ``python3 -m rsm_mappo``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .errors import ConfigError, NumericalError
from .ledger import MODES

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsm-mappo",
                                description="Train ring-road CAV agents with segment mixing.")
    p.add_argument("--config", help="key = value file with ExperimentConfig fields")
    p.add_argument("--preset", choices=("desk", "table2"), default=None,
                   help="base hyperparameters (default: table2, or the config's preset key)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed-list", help="comma separated seeds, e.g. 0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--segments", type=int, help="segments per replica")
    p.add_argument("--replicas", type=int, help="replicas per agent per round")
    p.add_argument("--tau", type=int, help="communication period in mini-batches")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-trajectories", action="store_true")
    p.add_argument("--event-log", action="store_true", help="write per-replica mixing reports")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra override, may be repeated (env.ring_length=300, ...)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> harness.ExperimentConfig:
    base = harness.preset(args.preset) if args.preset else None
    if args.config:
        cfg = harness.load_config(args.config, base)
    else:
        cfg = base or harness.preset("table2")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flags = {"mode": args.mode, "seeds": args.seed_list, "epochs": args.epochs,
             "P": args.segments, "kappa": args.replicas, "tau": args.tau, "out": args.out}
    overrides.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.dump_trajectories:
        overrides["dump_trajectories"] = "true"
    if args.event_log:
        overrides["event_log"] = "true"
    return harness.apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        results = harness.run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    for res in results:
        s = res.summary
        print(f"{cfg.mode} seed={res.seed} plateau={s['plateau_reward']} "
              f"rho_total={s['rho_total']} rho_ef={s['rho_ef']} psi={s['psi_upsilon_units']}")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
