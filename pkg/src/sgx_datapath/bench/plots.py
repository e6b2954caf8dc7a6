"""Throughput plots from a results CSV."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import BenchRecord, parse_csv  # noqa: E402

# keep PNG bytes identical across runs and library versions
_PNG_METADATA = {"Software": None}


def _label(r: BenchRecord) -> str:
    return r.variant if r.backend == "none" else f"{r.variant} ({r.backend})"


def _size_label(n: int) -> str:
    for unit, div in (("M", 1 << 20), ("K", 1 << 10)):
        if n >= div and n % div == 0:
            return f"{n // div}{unit}"
    return str(n)


def _plot(series: dict, path: Path, title: str, xlabel: str, log2: bool, ticks):
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=100)
    for label in sorted(series):
        pts = sorted(series[label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=label)
    if log2:
        ax.set_xscale("log", base=2)
    ax.set_xticks(ticks)
    ax.set_xticklabels([_size_label(t) if log2 else str(t) for t in ticks], rotation=45 if log2 else 0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("throughput (MB/s, MB = 10^6 bytes)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)


def emit_plots(source, outdir) -> list[Path]:
    """Write one plot per (workload, threads) over sizes and per (workload, size) over threads.

    ``source`` is a CSV path/text or a list of records.  Error rows are
    skipped.  Returns the written paths.
    """
    records = source if isinstance(source, list) else parse_csv(source)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    good = [r for r in records if r.ok]

    by_threads = defaultdict(lambda: defaultdict(list))
    by_size = defaultdict(lambda: defaultdict(list))
    for r in good:
        by_threads[(r.workload, r.threads)][_label(r)].append((r.buffer_bytes, r.mean_MBps))
        by_size[(r.workload, r.buffer_bytes)][_label(r)].append((r.threads, r.mean_MBps))

    written = []
    for (workload, threads), series in sorted(by_threads.items()):
        path = outdir / f"{workload}_threads{threads}_vs_size.png"
        ticks = sorted({x for pts in series.values() for x, _ in pts})
        _plot(series, path, f"{workload}: {threads} thread(s)", "buffer size (bytes)", True, ticks)
        written.append(path)
    for (workload, size), series in sorted(by_size.items()):
        path = outdir / f"{workload}_size{size}_vs_threads.png"
        ticks = sorted({x for pts in series.values() for x, _ in pts})
        _plot(series, path, f"{workload}: {_size_label(size)} buffers", "threads", False, ticks)
        written.append(path)
    return written
