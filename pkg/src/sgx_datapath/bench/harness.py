"""Multithreaded measurement harness.

Each cell gets a fresh enclave.  Worker threads allocate and touch their own
buffers, meet the coordinator at a start barrier and then loop the operation
until told to stop.  Every completed operation (or chunk of a long one) is
logged as ``(time, cumulative bytes)``.  The coordinator waits out the
warm-up, takes the measurement window, waits out the cool-down and stops the
workers, so the window only contains time during which all threads were
running.  The window is divided into ``reps`` equal slices and each slice's
aggregate throughput is obtained by interpolating every thread's byte log at
the slice edges.
"""

from __future__ import annotations

import csv
import gc
import io
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import psutil

from ..boundary import Enclave, GateConfig
from ..emulator import KiB, MiB, EpcConfig
from ..engine import Backend
from ..errors import HarnessError, ParseError
from .workloads import (NO_BACKEND, AesBench, FindMaxBench, Workload, footprint, parse_variant,
                        variants_for)

MB = 1_000_000
DEFAULT_SIZES = tuple(4 * KiB << i for i in range(17))  # 4 KiB ... 256 MiB
DEFAULT_THREADS = (1, 2, 4, 8, 16)

CSV_COLUMNS = ("workload", "variant", "backend", "buffer_bytes", "threads", "reps", "mean_MBps",
               "stddev_MBps", "transitions", "bytes_copied_in", "evictions")
ERROR_PREFIX = "ERROR:"


def default_memory_cap() -> int:
    """Half of physical RAM: cells estimated above this become error rows instead of OOM kills."""
    return psutil.virtual_memory().total // 2


def throughput_mbps(nbytes: float, seconds: float) -> float:
    """Throughput in MB/s with MB = 10**6 bytes."""
    return nbytes / seconds / MB


@dataclass(frozen=True)
class MatrixConfig:
    workloads: tuple[str, ...] = (Workload.FINDMAX.value, Workload.AESGCM.value)
    variants: tuple[str, ...] | None = None  # None = all variants of each workload
    backends: tuple[str, ...] = (Backend.ACCELERATED.value, Backend.PORTABLE.value)
    sizes: tuple[int, ...] = DEFAULT_SIZES
    threads: tuple[int, ...] = DEFAULT_THREADS
    reps: int = 30
    warmup: float = 0.2
    cooldown: float = 0.2
    rep_window: float = 0.005
    gate: GateConfig = field(default_factory=lambda: GateConfig(transition_cost=10e-6))
    epc: EpcConfig = field(default_factory=EpcConfig)
    memory_cap_bytes: int = field(default_factory=lambda: default_memory_cap())
    join_timeout: float = 120.0

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if list(self.sizes) != sorted(self.sizes) or not self.sizes:
            raise ValueError("sizes must be a nonempty ascending list")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("sizes must be positive")
        if not self.threads or any(t < 1 for t in self.threads):
            raise ValueError("thread counts must be >= 1")
        if min(self.warmup, self.cooldown) < 0 or self.rep_window <= 0:
            raise ValueError("warmup/cooldown must be >= 0 and rep_window > 0")
        for w in self.workloads:
            Workload(w)
        for b in self.backends:
            Backend(b)

    @property
    def window(self) -> float:
        return self.reps * self.rep_window

    def cells(self) -> list[tuple[str, str, str, int, int]]:
        """The cross product in execution order: (workload, variant, backend, size, threads)."""
        out = []
        for w in self.workloads:
            wanted = variants_for(w)
            if self.variants is not None:
                names = {v.value for v in wanted}
                wanted = [parse_variant(w, v) for v in self.variants if v in names]
            backends = [NO_BACKEND] if Workload(w) is Workload.FINDMAX else list(self.backends)
            for t in self.threads:
                for b in backends:
                    for v in wanted:
                        for s in self.sizes:
                            out.append((Workload(w).value, v.value, b, s, t))
        return out


@dataclass
class BenchRecord:
    workload: str
    variant: str
    backend: str
    buffer_bytes: int
    threads: int
    reps: int
    mean_MBps: float | None
    stddev_MBps: float | None
    transitions: int = 0
    bytes_copied_in: int = 0
    evictions: int = 0
    error: str | None = None
    # diagnostics, not written to CSV
    per_rep_MBps: list = field(default_factory=list, compare=False, repr=False)
    window: tuple = field(default=(), compare=False, repr=False)
    thread_spans: list = field(default_factory=list, compare=False, repr=False)
    overlap_ok: bool | None = field(default=None, compare=False, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def key(self) -> tuple:
        return (self.workload, self.variant, self.backend, self.buffer_bytes, self.threads)

    def csv_row(self) -> list[str]:
        if self.error is not None:
            mean, std = ERROR_PREFIX + self.error.replace("\n", " "), ""
        else:
            mean, std = repr(float(self.mean_MBps)), repr(float(self.stddev_MBps))
        return [self.workload, self.variant, self.backend, str(self.buffer_bytes), str(self.threads),
                str(self.reps), mean, std, str(self.transitions), str(self.bytes_copied_in),
                str(self.evictions)]


# ---------------------------------------------------------------------------
# CSV


def write_csv(records: Iterable[BenchRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.csv_row())


class CsvSink:
    """Appends one row per finished cell and flushes it immediately."""

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(CSV_COLUMNS)
        self._f.flush()

    def __call__(self, record: BenchRecord):
        self._w.writerow(record.csv_row())
        self._f.flush()

    def close(self):
        self._f.close()


def parse_csv(source) -> list[BenchRecord]:
    """Parse a results CSV (path or text) back into records."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read {source}: {exc}") from exc
    else:
        text = str(source)
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ParseError(f"expected header {','.join(CSV_COLUMNS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        d = dict(zip(CSV_COLUMNS, row))
        try:
            error = None
            if d["mean_MBps"].startswith(ERROR_PREFIX):
                error = d["mean_MBps"][len(ERROR_PREFIX):]
                mean = std = None
            else:
                mean, std = float(d["mean_MBps"]), float(d["stddev_MBps"])
            out.append(BenchRecord(d["workload"], d["variant"], d["backend"], int(d["buffer_bytes"]),
                                   int(d["threads"]), int(d["reps"]), mean, std, int(d["transitions"]),
                                   int(d["bytes_copied_in"]), int(d["evictions"]), error))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# measurement


class _Stop(Exception):
    """Raised inside a worker's progress callback to abandon a long operation."""


class _Worker:
    __slots__ = ("times", "done", "error", "stop", "ready", "first")

    def __init__(self, stop: threading.Event):
        self.times: list[float] = []
        self.done: list[float] = []
        self.error: BaseException | None = None
        self.stop = stop
        self.ready = threading.Event()  # set once the thread is running its loop
        self.first: float | None = None


def rep_throughputs(logs: Sequence[tuple[Sequence[float], Sequence[float]]], t0: float, t1: float,
                    reps: int) -> list[float]:
    """Aggregate MB/s for each of ``reps`` equal slices of ``[t0, t1]``.

    ``logs`` holds one ``(times, cumulative_bytes)`` pair per thread.  Bytes
    between two log points are spread evenly over the time between them.
    """
    edges = np.linspace(t0, t1, reps + 1)
    total = np.zeros(reps + 1)
    for times, done in logs:
        total += np.interp(edges, np.asarray(times, dtype=float), np.asarray(done, dtype=float))
    return [throughput_mbps(b, d) for b, d in zip(np.diff(total), np.diff(edges))]


def _summarize(per_rep: list[float]) -> tuple[float, float]:
    mean = math.fsum(per_rep) / len(per_rep)
    std = float(np.std(per_rep, ddof=1)) if len(per_rep) > 1 else 0.0
    return mean, std


def measure(ops: Sequence[Callable], warmup: float, window: float, cooldown: float, reps: int,
            on_window: Callable[[str], None] | None = None, join_timeout: float = 120.0) -> dict:
    """Run one operation per thread under the warm-up/window/cool-down protocol.

    Returns a dict with ``per_rep`` (MB/s), ``window`` (t0, t1), ``spans``
    (loop start and last log time per thread) and ``overlap_ok``.
    ``on_window("start"|"end")`` runs in the coordinator at the window edges.
    """
    n = len(ops)
    stop = threading.Event()
    barrier = threading.Barrier(n + 1)
    workers = [_Worker(stop) for _ in range(n)]

    def body(op, w: _Worker):
        times, done = w.times, w.done
        clock = time.perf_counter
        total = 0

        def progress(nbytes):
            nonlocal total
            total += nbytes
            times.append(clock())
            done.append(total)
            if stop.is_set():
                raise _Stop

        try:
            barrier.wait()
        except threading.BrokenBarrierError:
            return
        times.append(clock())
        done.append(0)
        w.first = times[0]
        w.ready.set()
        stopped = stop.is_set
        log_t, log_b = times.append, done.append
        try:
            while not stopped():
                before = total
                nbytes = op(progress)
                if total == before:  # the operation did not report progress itself
                    total += nbytes
                    log_t(clock())
                    log_b(total)
        except _Stop:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the coordinator
            w.error = exc
            stop.set()

    threads = []
    try:
        for op, w in zip(ops, workers):
            th = threading.Thread(target=body, args=(op, w), daemon=True)
            th.start()
            threads.append(th)
    except RuntimeError as exc:
        barrier.abort()
        raise HarnessError(f"could not start worker threads: {exc}") from exc

    barrier.wait()
    try:
        # a thread can wait a long time for its first time slice on a busy
        # host, so the warm-up starts once every worker is running
        deadline = time.perf_counter() + join_timeout
        for w in workers:
            while not w.ready.wait(0.01) and not stop.is_set():
                if time.perf_counter() > deadline:
                    raise HarnessError("a worker did not start within the join timeout")
        _sleep(warmup, stop)
        t0 = time.perf_counter()
        if on_window:
            on_window("start")
        _sleep(window, stop)
        t1 = time.perf_counter()
        if on_window:
            on_window("end")
        # a starved thread may not have run at all since before t1, so the
        # cool-down lasts until every worker has logged work past the window
        deadline = t1 + join_timeout
        for w in workers:
            while w.times[-1] < t1 and not stop.wait(0.001):
                if time.perf_counter() > deadline:
                    raise HarnessError("a worker made no progress past the window within the join timeout")
        _sleep(t1 + cooldown - time.perf_counter(), stop)
    finally:
        stop.set()
        for th in threads:
            th.join(join_timeout)
    if any(th.is_alive() for th in threads):
        raise HarnessError("worker did not stop within the join timeout")
    for w in workers:
        if w.error is not None:
            raise w.error

    spans = [(w.first, w.times[-1]) for w in workers]
    overlap_ok = all(a <= t0 and b >= t1 for a, b in spans)
    per_rep = rep_throughputs([(w.times, w.done) for w in workers], t0, t1, reps)
    return {"per_rep": per_rep, "window": (t0, t1), "spans": spans, "overlap_ok": overlap_ok}


def _sleep(seconds: float, stop: threading.Event):
    # returns early only if a worker failed
    if seconds > 0:
        stop.wait(seconds)


def _fill_random(buf, rng: np.random.Generator):
    """Fill a buffer with a random 1 MiB block repeated (cheap for large buffers)."""
    view = buf.view
    block = rng.bytes(min(len(view), MiB))
    for off in range(0, len(view), len(block) or 1):
        n = min(len(block), len(view) - off)
        view[off:off + n] = block[:n]


def run_cell(workload: str, variant: str, buffer_bytes: int, threads: int,
             config: MatrixConfig | None = None, backend: str = Backend.ACCELERATED.value,
             seed: int | None = None) -> BenchRecord:
    """Measure one matrix cell on a fresh enclave."""
    config = config or MatrixConfig()
    w = Workload(workload)
    v = parse_variant(w, variant)
    b = NO_BACKEND if w is Workload.FINDMAX else Backend(backend).value
    rec = BenchRecord(w.value, v.value, b, buffer_bytes, threads, config.reps, None, None)

    fp = footprint(w, v, buffer_bytes, threads)
    if fp.total > config.memory_cap_bytes:
        rec.error = f"memory cap ({fp.total} > {config.memory_cap_bytes} bytes)"
        return rec
    if fp.enclave > config.epc.emulation_cap_bytes:
        rec.error = f"enclave emulation cap ({fp.enclave} > {config.epc.emulation_cap_bytes} bytes)"
        return rec

    enclave = Enclave(config.epc, config.gate, untrusted_capacity=4 * config.memory_cap_bytes)
    rng = np.random.default_rng(seed)
    ops = []
    try:
        bench = FindMaxBench(enclave) if w is Workload.FINDMAX else AesBench(enclave, b)
        first = enclave.untrusted.alloc(buffer_bytes)
        _fill_random(first, rng)
        for i in range(threads):
            # each thread owns an independent, already-touched buffer
            buf = first if i == 0 else enclave.untrusted.from_bytes(first.view)
            ops.append(bench.prepare(v, buf))
        enclave.epc.reset_paging_stats()
        enclave.gate.reset_stats()

        snaps = {}

        def on_window(edge):
            snaps[edge] = (enclave.gate.stats(), enclave.epc.paging_stats())

        m = measure(ops, config.warmup, config.window, config.cooldown, config.reps, on_window,
                    config.join_timeout)
    except HarnessError:
        raise
    except Exception as exc:  # noqa: BLE001 - recorded in-row
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    finally:
        ops.clear()
        enclave.close()
        gc.collect()

    (g0, p0), (g1, p1) = snaps["start"], snaps["end"]
    rec.mean_MBps, rec.stddev_MBps = _summarize(m["per_rep"])
    rec.per_rep_MBps = m["per_rep"]
    rec.window = m["window"]
    rec.thread_spans = m["spans"]
    rec.overlap_ok = m["overlap_ok"]
    rec.transitions = g1.calls - g0.calls
    rec.bytes_copied_in = g1.bytes_copied_in - g0.bytes_copied_in
    rec.evictions = p1.evictions - p0.evictions
    return rec


def run_matrix(config: MatrixConfig | None = None, out=None,
               on_record: Callable[[BenchRecord], None] | None = None) -> list[BenchRecord]:
    """Run every cell of ``config``; failed cells become error rows.

    If ``out`` is a path, rows are written and flushed as cells finish.
    """
    config = config or MatrixConfig()
    sink = CsvSink(out) if out is not None else None
    records = []
    try:
        for workload, variant, backend, size, threads in config.cells():
            try:
                rec = run_cell(workload, variant, size, threads, config, backend)
            except Exception as exc:  # noqa: BLE001 - includes harness failures
                rec = BenchRecord(workload, variant, backend, size, threads, config.reps, None, None,
                                  error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
            if sink:
                sink(rec)
            if on_record:
                on_record(rec)
    finally:
        if sink:
            sink.close()
    return records
