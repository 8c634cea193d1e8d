"""Command line: ``hwros check|run|bench <config>``.

Exit codes: 0 success, 1 configuration error, 2 runtime fault,
3 benchmark timeout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from typing import Dict, List, Optional

from .config import ConfigError, ProjectConfig, parse_config, parse_size

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAULT = 2
EXIT_TIMEOUT = 3


def _load(path: str) -> ProjectConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _mapping(items: Optional[List[str]]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or value not in ("sw", "hw"):
            raise ConfigError(f"--map expects node=sw|hw, got {item!r}")
        out[name] = value
    return out


def cmd_check(args) -> int:
    cfg = _load(args.config)
    cfg = cfg.with_mapping(_mapping(args.map))
    decls = sum(len(g.decls) for g in cfg.groups)
    print(f"{args.config}: ok ({len(cfg.groups)} resource groups, {decls} declarations, "
          f"{len(cfg.threads)} threads, {cfg.slots} slots)")
    for t in cfg.threads:
        where = f"slot {t.slot}" if t.mapping == "hw" else "software"
        print(f"  {t.name}: {t.behavior or '-'} on {where}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .bench import behavior_stats
    from .system import instantiate

    cfg = _load(args.config)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    system = instantiate(cfg, mapping=_mapping(args.map), base_dir=os.path.dirname(os.path.abspath(args.config)))
    deadline = None if args.duration is None else time.monotonic() + args.duration
    faults = {}
    try:
        while not stop.is_set():
            faults = system.faults()
            if faults:
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            stop.wait(0.05)
    finally:
        system.stop()
        if args.stats:
            with open(args.stats, "w", encoding="utf-8") as fh:
                json.dump(behavior_stats(system.behaviors), fh)
    faults = faults or system.faults()
    for name, exc in faults.items():
        print(f"{name}: fault: {exc}", file=sys.stderr)
    return EXIT_FAULT if faults else EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchmarkError, run_benchmark

    cfg = _load(args.config)
    sizes = [parse_size(s) for s in args.sizes.split(",")] if args.sizes else None
    try:
        report = run_benchmark(cfg, sizes=sizes, iterations=args.iters, mapping=_mapping(args.map),
                               compare=args.compare, two_process=True if args.two_process else None,
                               timeout=args.timeout,
                               base_dir=os.path.dirname(os.path.abspath(args.config)))
    except BenchmarkError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return EXIT_FAULT
    if args.json:
        print(json.dumps(report.to_json(), indent=2))
    else:
        print(report.format_table())
    return EXIT_OK if report.complete else EXIT_TIMEOUT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hwros", description="Node graph runtime with hardware-thread emulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("check", help="parse and validate a configuration")
    c.add_argument("config")
    c.add_argument("--map", action="append", metavar="NODE=sw|hw")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("run", help="instantiate and run a configuration")
    r.add_argument("config")
    r.add_argument("--map", action="append", metavar="NODE=sw|hw")
    r.add_argument("--duration", type=float, help="seconds to run (default: until SIGTERM/SIGINT)")
    r.add_argument("--stats", help="write per-node processing times as JSON on exit")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="ping-pong roundtrip benchmark")
    b.add_argument("config")
    b.add_argument("--sizes", help="comma-separated sizes, e.g. 4B,8KiB,1MiB,6MiB")
    b.add_argument("--iters", type=int)
    b.add_argument("--timeout", type=float, help="per-iteration timeout in seconds")
    b.add_argument("--map", action="append", metavar="NODE=sw|hw")
    b.add_argument("--compare", action="store_true", help="run software and hardware mappings and report S_round")
    b.add_argument("--two-process", action="store_true", help="run the copy node in a child process over TCP")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
