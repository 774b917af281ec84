"""Command-line entry point: ``copkit run|validate|suite|describe``.

Exit codes: 0 success, 1 configuration or usage error, 2 study failure,
3 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, CopkitError, InvalidSpec

EXIT_OK, EXIT_CONFIG, EXIT_STUDY, EXIT_ACCEPTANCE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are config errors here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="copkit", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    for name, helptext in (("run", "run a study from a JSON config"), ("validate", "check a config without running it")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config_path", nargs="?", help="path to the JSON config")
        sp.add_argument("--config", dest="config_flag", help="path to the JSON config (alternative to the positional)")
        if name == "run":
            sp.add_argument("--out-dir", help="output directory (overrides the config's output)")
            sp.add_argument("--seeds", type=_seed_list, help="comma list or ranges, e.g. 0,1,5-7")
            sp.add_argument("--parallel", type=int, default=1, help="worker processes")

    sp = sub.add_parser("suite", help="run the acceptance battery")
    sp.add_argument("--out-dir", default="suite_results")
    sp.add_argument("--only", type=_seed_list, help="criterion numbers to run")
    sp.add_argument("--skip-slow", action="store_true", help="skip the long-running criteria")
    sp.add_argument("--parallel", type=int, default=1)

    sp = sub.add_parser("describe", help="print d_mu, d_pi, discounted d_pi and K coefficients")
    sp.add_argument("env", help="e.g. chain5, random_ergodic10, gridworld5x5, episodic_chain5, divergence_example")
    sp.add_argument("--gamma-hat", type=float, action="append", dest="gamma_hats")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _load(args):
    from .harness import ExperimentConfig

    path = args.config_flag or args.config_path
    if not path:
        raise ConfigError("no config given (positional path or --config)")
    return ExperimentConfig.load(path)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "validate":
            cfg = _load(args)
            print(f"ok: {cfg.study} study on {cfg.env.kind}")
            return EXIT_OK
        if args.command == "run":
            from .harness import run_study

            cfg = _load(args)
            if args.seeds:
                cfg.budget.seeds = args.seeds
            paths = run_study(cfg, args.out_dir, parallel=args.parallel)
            for name, path in paths.items():
                print(f"{name}: {path}")
            return EXIT_OK
        if args.command == "describe":
            from .harness import describe

            print(json.dumps(describe(args.env, args.gamma_hats or [0.9], seed=args.seed), indent=2))
            return EXIT_OK
        if args.command == "suite":
            from .acceptance import run_battery

            results = run_battery(args.out_dir, only=args.only, skip_slow=args.skip_slow, parallel=args.parallel)
            for r in results:
                print(r.line())
            return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CopkitError as exc:
        print(f"study failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STUDY
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
