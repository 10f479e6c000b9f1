"""``bench`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import CapacityExceeded, IoFailure, SpawnFailure
from .config import DEFAULT_UTILIZATION_CAP, DESK_TIMING, FULL_TIMING, SweepConfig, parse_mode, sweep_configs
from .harness import check_capacity, run_config
from .report import emit_report

log = logging.getLogger("bench")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Publish/receive/end-to-end latency sweeps.")
    p.add_argument("--sweep", choices=["A", "B", "C", "custom"], default="A")
    p.add_argument("--mode", choices=["event", "poll"], default="event")
    p.add_argument("--poll-interval-us", type=float, default=100.0)
    p.add_argument("--backend", choices=["inproc", "shm"], default="inproc")
    p.add_argument("--rate-hz", type=float, default=100.0)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--warmup-s", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--paper-scale", action="store_true", help="use the full-size sweep ranges and timing")
    p.add_argument("--out-dir", default="bench-out")
    p.add_argument("--topics", "-T", type=int, default=1, help="custom sweep only")
    p.add_argument("--subscribers", "-S", type=int, default=1, help="custom sweep only")
    p.add_argument("--utilization-cap", type=float, default=DEFAULT_UTILIZATION_CAP)
    p.add_argument("--capacity", type=float, help="events/s capacity; probed on this host when omitted")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="bench: %(message)s")
    timing = FULL_TIMING if args.paper_scale else DESK_TIMING
    try:
        base = SweepConfig(
            sweep=args.sweep,
            topics=args.topics,
            subscribers_per_topic=args.subscribers,
            rate_hz=args.rate_hz,
            duration=args.duration_s if args.duration_s is not None else timing["duration"],
            warmup=args.warmup_s if args.warmup_s is not None else timing["warmup"],
            iterations=args.iterations if args.iterations is not None else timing["iterations"],
            mode=parse_mode(args.mode, args.poll_interval_us),
            backend=args.backend,
            utilization_cap=args.utilization_cap,
            capacity=args.capacity,
        )
    except ValueError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    configs = [base] if args.sweep == "custom" else sweep_configs(args.sweep, base, args.paper_scale)

    samples = []
    for cfg in configs:
        try:
            check_capacity(cfg)
        except CapacityExceeded as exc:
            log.warning("skipping T=%d S=%d: %s", cfg.T, cfg.S, exc)
            continue
        log.info("running T=%d S=%d R=%g %s/%s", cfg.T, cfg.S, cfg.rate_hz, cfg.mode_name, cfg.backend)
        try:
            result = run_config(cfg)
        except SpawnFailure as exc:
            print(f"bench: {exc}", file=sys.stderr)
            return 1
        if result.missing or result.duplicates:
            log.warning("T=%d S=%d: %d missing, %d duplicate deliveries", cfg.T, cfg.S, result.missing, result.duplicates)
        samples.extend(result.samples)
    try:
        paths = emit_report(samples, args.out_dir, args.sweep)
    except IoFailure as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 1
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
