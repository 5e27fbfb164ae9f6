"""Command line entry point.

    eqexplore run <config.ini> [--seed S] [--out DIR]
    eqexplore suite <config-dir> --seeds 0..9 --out DIR
    eqexplore check <config.ini>
"""
import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, resolved_text
from .scenarios import run_suite, run_trial, summarize, write_summary, write_trial


def parse_seeds(text: str) -> list:
    """``"0..4"`` -> [0, 1, 2, 3, 4]; ``"1,5,7"`` -> [1, 5, 7]; ``""`` -> []."""
    text = text.strip()
    if not text:
        return []
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.replace(",", " ").split()]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqexplore", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one seeded trial")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override [scenario] seed")
    run.add_argument("--out", type=Path, default=Path("out"))

    suite = sub.add_parser("suite", help="run every config in a directory for every seed")
    suite.add_argument("config_dir", type=Path)
    suite.add_argument("--seeds", type=parse_seeds, required=True, help="S1..Sk or a comma list")
    suite.add_argument("--out", type=Path, default=Path("out"))

    check = sub.add_parser("check", help="validate a config and print its resolved form")
    check.add_argument("config", type=Path)
    return p


def _report(failures) -> int:
    for msg in failures:
        print(f"FAILED: {msg}", file=sys.stderr)
    return 1 if failures else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check":
            print(resolved_text(load_config(args.config)), end="")
            return 0
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            rec = run_trial(cfg)
            write_trial(rec, args.out)
            write_summary(summarize([rec]), args.out / "summary.json")
            return _report(rec.failures)
        if not args.config_dir.is_dir():
            raise ConfigError(f"not a directory: {args.config_dir}")
        _, failures = run_suite(args.config_dir, args.seeds, args.out)
        return _report(failures)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
