"""``drdiff`` command-line entry point.

    drdiff build-mask|train|sample|bench|ablate|sweep|params [--config PATH] [--set section.key=value ...] [--out DIR]

``--out`` defaults to ``$DRDIFF_OUT`` and then to ``./drdiff_out``. Exit
status: 0 on success, 1 for configuration errors (reported before any work
starts), 2 for failures while running.
"""

from __future__ import annotations

import argparse
import os
import sys

from .commands import COMMANDS
from .config import ConfigError, load_config
from .corpus import CorpusError

ENV_OUT = "DRDIFF_OUT"
DEFAULT_OUT = "drdiff_out"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drdiff", description="Sparse-attention MoE diffusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="INI file with [section] key = value entries")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or ./{DEFAULT_OUT})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or os.environ.get(ENV_OUT) or DEFAULT_OUT
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"drdiff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"drdiff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, FloatingPointError, OSError, ValueError, RuntimeError, MemoryError) as exc:
        print(f"drdiff: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"drdiff: {args.command} wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
