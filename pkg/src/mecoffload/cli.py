"""Command line: ``mecoffload {run,aggregate,replay}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import ConfigError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mecoffload", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one algorithm")
    r.add_argument("--config", default="desk", help="JSON config path or bundled name (desk, full)")
    r.add_argument("--algorithm", choices=sorted(harness.ALGORITHMS))
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--episodes", type=int)
    r.add_argument("--eval-episodes", type=int)
    r.add_argument("--budget-minutes", type=float)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--dump-trajectories", action="store_true")

    a = sub.add_parser("aggregate", help="mean and 95%% CI across run directories")
    a.add_argument("runs", nargs="+")
    a.add_argument("--out", required=True, help="output CSV path")

    rp = sub.add_parser("replay", help="re-score a run's trajectory dump")
    rp.add_argument("run_dir")
    rp.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = harness.load_config(args.config)
            overrides = {"algorithm": args.algorithm, "seed": args.seed,
                         "max_episodes": args.episodes, "eval_episodes": args.eval_episodes,
                         "budget_minutes": args.budget_minutes,
                         "checkpoint_every": args.checkpoint_every}
            d = cfg.to_dict()
            d.update({k: v for k, v in overrides.items() if v is not None})
            d["out_dir"] = args.out
            d["dump_trajectories"] = args.dump_trajectories or cfg.dump_trajectories
            summary = harness.run(harness.RunConfig.from_dict(d))
            print(json.dumps(summary, indent=2, default=str))
            return summary["exit_code"]
        if args.command == "aggregate":
            table = harness.aggregate(args.runs, args.out)
            print(f"aggregated {table['n_runs']} runs over {len(table['episode'])} episodes -> {args.out}")
            return 0
        report = harness.replay(args.run_dir)
        print(json.dumps(report, indent=2))
        return 0 if max(report["max_rel_error"].values()) <= args.tolerance else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
