"""Desk-scale media stubs.

Stand-ins for real encoder/generator binaries so pipeline tests never need
codec tooling: `pattern` emits a deterministic byte pattern to stdout,
`passthrough` copies stdin to stdout. A real encoder is opt-in through
function configuration.
"""

from __future__ import annotations

import argparse
import sys
import time


def generate_pattern(total: int | None, chunk_size: int = 4096, endless: bool = False,
                     rate_delay: float = 0.0, out=None):
    out = out or sys.stdout.buffer
    pattern = bytes(range(256))
    emitted = 0
    while endless or (total is not None and emitted < total):
        if total is not None and not endless:
            n = min(chunk_size, total - emitted)
        else:
            n = chunk_size
        block = (pattern * (n // len(pattern) + 1))[:n]
        out.write(block)
        out.flush()
        emitted += n
        if rate_delay:
            time.sleep(rate_delay)
    return emitted


def passthrough(inp=None, out=None, chunk_size: int = 64 * 1024):
    inp = inp or sys.stdin.buffer
    out = out or sys.stdout.buffer
    total = 0
    while True:
        chunk = inp.read(chunk_size)
        if not chunk:
            break
        out.write(chunk)
        out.flush()
        total += len(chunk)
    return total


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="stubs")
    sub = parser.add_subparsers(dest="mode", required=True)
    pattern_parser = sub.add_parser("pattern")
    pattern_parser.add_argument("--bytes", type=int, default=4096)
    pattern_parser.add_argument("--chunk", type=int, default=4096)
    pattern_parser.add_argument("--endless", action="store_true")
    pattern_parser.add_argument("--delay", type=float, default=0.0)
    passthrough_parser = sub.add_parser("passthrough")
    passthrough_parser.add_argument("flags", nargs="*")  # encoder-style flags, ignored
    args = parser.parse_args(argv)
    if args.mode == "pattern":
        generate_pattern(None if args.endless else args.bytes, chunk_size=args.chunk,
                         endless=args.endless, rate_delay=args.delay)
    else:
        passthrough()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
