"""Command-line entry point: ``fuzz -i <dir> -o <dir> -t <target> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .campaign import CampaignConfig, CampaignFatal, StartupError, run_campaign
from .corpus import PersistenceError
from .executor import DEFAULT_TIMEOUT_MS
from .scheduler import Mode

EXIT_OK = 0
EXIT_STARTUP = 1
EXIT_FATAL = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fuzz",
        description="Coverage-guided greybox fuzzer with a learned energy multiplier.",
    )
    p.add_argument("-i", dest="input_dir", required=True, help="directory of seed inputs")
    p.add_argument("-o", dest="output_dir", required=True, help="output directory (absent or empty)")
    p.add_argument("-t", dest="target", required=True,
                   help="bundled target name (magic4, chain16, spinner) or path to an executable")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.BASELINE.value)
    p.add_argument("-d", dest="skip_deterministic", action="store_true",
                   help="skip the deterministic stage")
    p.add_argument("--duration", type=float, default=None, help="run time in seconds")
    p.add_argument("--fuzzing-prob", type=float, default=0.4,
                   help="probability of whole-input havoc instead of a bandit episode")
    p.add_argument("--epsilon", type=float, default=0.1, help="exploration rate")
    p.add_argument("--lr", type=float, default=0.001, help="policy learning rate")
    p.add_argument("--model", dest="model_path", default=None, help="policy model file")
    p.add_argument("--timeout-ms", type=int, default=DEFAULT_TIMEOUT_MS)
    p.add_argument("--seed", type=int, default=0, help="RNG seed (unsigned 64-bit)")
    p.add_argument("--max-execs", type=int, default=None, help="stop after this many executions")
    p.add_argument("--stop-on-crash", action="store_true", help="stop at the first crash")
    p.add_argument("--virtual-clock", action="store_true",
                   help="charge in-process executions by edge count instead of wall time "
                        "(fully reproducible runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if not 0 <= args.seed < 2 ** 64:
        print("fuzz: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_STARTUP
    config = CampaignConfig(
        input_dir=args.input_dir,
        output_dir=args.output_dir,
        target=args.target,
        mode=Mode(args.mode),
        skip_deterministic=args.skip_deterministic,
        duration=args.duration,
        fuzzing_prob=args.fuzzing_prob,
        epsilon=args.epsilon,
        learning_rate=args.lr,
        model_path=args.model_path,
        timeout_ms=args.timeout_ms,
        rng_seed=args.seed,
        max_execs=args.max_execs,
        stop_on_crash=args.stop_on_crash,
        virtual_clock=args.virtual_clock,
    )
    try:
        summary = run_campaign(config)
    except StartupError as exc:
        print(f"fuzz: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    except (CampaignFatal, PersistenceError, FloatingPointError, OSError) as exc:
        print(f"fuzz: fatal: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(json.dumps(summary, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
