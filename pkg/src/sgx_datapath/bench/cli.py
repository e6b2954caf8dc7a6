"""Command line entry point: ``bench run | plot | check``."""

from __future__ import annotations

import argparse
import re
import sys
import time

from ..boundary import GateConfig
from ..emulator import EpcConfig
from ..errors import IncompleteMatrix, ParseError
from .harness import DEFAULT_SIZES, DEFAULT_THREADS, MatrixConfig, parse_csv, run_matrix
from .workloads import Workload, parse_variant

_SIZE_UNITS = {"": 1, "B": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}
_TIME_UNITS = {"": 1.0, "s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9}


def parse_size(text: str) -> int:
    """``4K`` -> 4096, ``96M`` -> 100663296; binary multiples, optional ``iB``/``B`` suffix."""
    m = re.fullmatch(r"\s*(\d+)\s*([KMG]?)(?:i?B)?\s*", text, re.IGNORECASE)
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(m.group(1)) * _SIZE_UNITS[m.group(2).upper()]


def parse_duration(text: str) -> float:
    m = re.fullmatch(r"\s*(\d+(?:\.\d*)?|\.\d+)\s*(s|ms|us|µs|ns)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    return float(m.group(1)) * _TIME_UNITS[m.group(2) or ""]


def _list(conv):
    def parse(text: str):
        return [conv(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Enclave data-path benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark matrix and write a CSV")
    run.add_argument("--workload", default="all",
                     help="findmax, aesgcm, or all (comma-separated list allowed)")
    run.add_argument("--variants", default="all", help="comma-separated variant names or 'all'")
    run.add_argument("--backends", default="accelerated,portable", help="AES-GCM backends")
    run.add_argument("--sizes", type=_list(parse_size), default=list(DEFAULT_SIZES),
                     help="buffer sizes, e.g. 4K,64K,1M,8M,96M,256M")
    run.add_argument("--threads", type=_list(int), default=list(DEFAULT_THREADS))
    run.add_argument("--reps", type=int, default=30)
    run.add_argument("--transition-cost", type=parse_duration, default=10e-6,
                     help="injected cost per trusted call, e.g. 10us")
    run.add_argument("--epc-budget", type=parse_size, default=EpcConfig().budget_bytes)
    run.add_argument("--warmup", type=parse_duration, default=0.2)
    run.add_argument("--cooldown", type=parse_duration, default=0.2)
    run.add_argument("--rep-window", type=parse_duration, default=0.005,
                     help="measurement time per repetition")
    run.add_argument("--memory-cap", type=parse_size, default=MatrixConfig().memory_cap_bytes,
                     help="cells whose estimated footprint exceeds this are recorded as errors")
    run.add_argument("--out", default="results.csv")
    run.add_argument("--quiet", action="store_true")

    plot = sub.add_parser("plot", help="render plots from a results CSV")
    plot.add_argument("--in", dest="input", required=True)
    plot.add_argument("--outdir", default="plots")

    check = sub.add_parser("check", help="evaluate curve-shape assertions (exit 0 = pass)")
    check.add_argument("--in", dest="input", required=True)
    check.add_argument("--cores", type=int, default=None, help="override the physical core count")
    return p


def _config(args) -> MatrixConfig:
    workloads = [w.value for w in Workload] if args.workload == "all" else args.workload.split(",")
    for w in workloads:
        Workload(w)
    variants = None
    if args.variants != "all":
        variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
        for v in variants:
            if not any(_known(w, v) for w in workloads):
                raise ValueError(f"unknown variant {v!r}")
    return MatrixConfig(
        workloads=tuple(workloads), variants=variants,
        backends=tuple(b.strip() for b in args.backends.split(",") if b.strip()),
        sizes=tuple(sorted(args.sizes)), threads=tuple(args.threads), reps=args.reps,
        warmup=args.warmup, cooldown=args.cooldown, rep_window=args.rep_window,
        gate=GateConfig(transition_cost=args.transition_cost),
        epc=EpcConfig(budget_bytes=args.epc_budget), memory_cap_bytes=args.memory_cap)


def _known(workload, variant) -> bool:
    try:
        parse_variant(workload, variant)
        return True
    except ValueError:
        return False


def cmd_run(args) -> int:
    try:
        config = _config(args)
    except ValueError as exc:
        print(f"bench run: {exc}", file=sys.stderr)
        return 2
    cells = config.cells()
    started = time.perf_counter()
    done = [0]

    def report(rec):
        done[0] += 1
        if not args.quiet:
            value = f"ERROR:{rec.error}" if rec.error else f"{rec.mean_MBps:10.1f} MB/s"
            print(f"[{done[0]}/{len(cells)} {time.perf_counter() - started:6.1f}s] {rec.workload} "
                  f"{rec.variant} {rec.backend} {rec.buffer_bytes}B x{rec.threads}: {value}",
                  file=sys.stderr, flush=True)

    records = run_matrix(config, out=args.out, on_record=report)
    bad = sum(1 for r in records if not r.ok)
    print(f"wrote {len(records)} rows ({bad} errors) to {args.out} "
          f"in {time.perf_counter() - started:.1f}s")
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots  # matplotlib is only needed here

    try:
        paths = emit_plots(args.input, args.outdir)
    except ParseError as exc:
        print(f"bench plot: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


def cmd_check(args) -> int:
    from .shape import shape_check

    try:
        report = shape_check(parse_csv(args.input), cores=args.cores)
    except (ParseError, IncompleteMatrix) as exc:
        print(f"bench check: {exc}", file=sys.stderr)
        return 1
    print(report.render())
    return 0 if report.ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"run": cmd_run, "plot": cmd_plot, "check": cmd_check}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
