"""Command-line driver.

Usage::

    fmtgp [--config PATH] [--seed N] [--jobs N] [--out DIR] VERB

with ``VERB`` one of generate, fit, predict, loo, compare, benchmark,
envelope.  Exit codes: 0 success, 1 numerical failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import sys

from . import config as config_mod
from .errors import ConfigError, FMTGPError, SizeGuardError
from .experiments import VERBS

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="fmtgp", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", metavar="PATH", help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, metavar="N", help="root seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes (default 1)")
    p.add_argument("--out", default=".", metavar="DIR", help="existing output directory")
    p.add_argument("verb", choices=sorted(VERBS))
    return p


def _summary_line(verb, result):
    if not isinstance(result, dict):
        return f"{verb}: done"
    flat = {}
    for k, v in result.items():
        if isinstance(v, dict):
            flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            flat[k] = v
    parts = [f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
             for k, v in flat.items() if isinstance(v, (int, float, str))]
    return f"{verb}: " + " ".join(parts)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        fn = VERBS[args.verb]
        kwargs = {"jobs": args.jobs} if "jobs" in fn.__code__.co_varnames else {}
        result = fn(cfg, args.out, **kwargs)
    except (SizeGuardError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FMTGPError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(_summary_line(args.verb, result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
