"""Curve-shape assertions over a set of benchmark records."""

from __future__ import annotations

from dataclasses import dataclass, field

import psutil

from ..emulator import KiB, MiB
from ..errors import IncompleteMatrix
from .harness import BenchRecord

ACCEL = "accelerated"
PORTABLE = "portable"

SMALL_SIZE = 4 * KiB
SMALL_GAP_MAX = 0.6
CONVERGE_FROM = 256 * KiB
CONVERGE_MIN = 0.85
EPC_BELOW = 8 * MiB
EPC_ABOVE = 256 * MiB
COLLAPSE_MAX = 0.5
GAP_SIZE = MiB
BACKEND_GAP_MAX = 0.7
SCALING_SIZE = 256 * KiB
SCALING_THREADS = 4
SCALING_MIN = 2.8
PLATEAU_MAX = 1.15


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "n/a"
    cells: list[str] = field(default_factory=list)
    margin: float | None = None  # positive = inside the bound
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class ShapeReport:
    checks: list[Check]

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def render(self) -> str:
        lines = []
        for c in self.checks:
            margin = "" if c.margin is None else f" margin={c.margin:+.3f}"
            lines.append(f"[{c.status.upper():4}] {c.name}{margin}: {c.detail}")
            for cell in c.cells:
                lines.append(f"         {cell}")
        lines.append("overall: " + ("PASS" if self.ok else "FAIL"))
        return "\n".join(lines)


def physical_cores() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


class _Index:
    def __init__(self, records):
        self.by_key = {}
        for r in records:
            self.by_key[r.key] = r
        self.missing: list[tuple] = []

    def get(self, workload, variant, backend, size, threads) -> BenchRecord | None:
        key = (workload, variant, backend, size, threads)
        r = self.by_key.get(key)
        if r is None:
            self.missing.append(key)
        return r

    def sizes(self, workload, variant, backend, threads):
        return sorted(k[3] for k in self.by_key if k[:3] == (workload, variant, backend) and k[4] == threads)

    def threads(self, workload, variant, backend, size):
        return sorted(k[4] for k in self.by_key if k[:4] == (workload, variant, backend, size))


def _cell(r: BenchRecord) -> str:
    value = f"ERROR:{r.error}" if r.error else f"{r.mean_MBps:.1f} MB/s"
    return f"{r.workload}/{r.variant}/{r.backend} size={r.buffer_bytes} threads={r.threads}: {value}"


def _errored(name, recs) -> Check | None:
    bad = [r for r in recs if r.error]
    if bad:
        return Check(name, "fail", [_cell(r) for r in recs], None, "needed cells failed to run")
    return None


def _ratio_check(idx: _Index, name: str, size: int, bound: float, at_most: bool) -> Check | None:
    u = idx.get("aesgcm", "UntrustedBaseline", ACCEL, size, 1)
    t = idx.get("aesgcm", "TrustedAccessInPlace", ACCEL, size, 1)
    if u is None or t is None:
        return None
    return _errored(name, [u, t]) or _bounded(name, [u, t], t.mean_MBps / u.mean_MBps, bound, at_most,
                                              f"TrustedAccessInPlace/UntrustedBaseline at {size} B")


def _bounded(name, recs, value, bound, at_most, what) -> Check:
    ok = value <= bound if at_most else value >= bound
    margin = bound - value if at_most else value - bound
    rel = "<=" if at_most else ">="
    return Check(name, "pass" if ok else "fail", [_cell(r) for r in recs], margin,
                 f"{what} = {value:.3f} (need {rel} {bound})")


def shape_check(records, cores: int | None = None) -> ShapeReport:
    """Evaluate the curve assertions; raises :class:`IncompleteMatrix` if cells are absent.

    All cells are AES-GCM; the single-thread ones use the accelerated backend.
    Thread scaling is only asserted when the host has at least four physical
    cores; otherwise that check reports ``n/a``.
    """
    idx = _Index(records)
    cores = cores or physical_cores()
    checks: list[Check] = []

    c = _ratio_check(idx, "small_buffer_gap", SMALL_SIZE, SMALL_GAP_MAX, at_most=True)
    if c:
        checks.append(c)

    large = [s for s in idx.sizes("aesgcm", "TrustedAccessInPlace", ACCEL, 1) if s >= CONVERGE_FROM]
    if not large:
        idx.missing.append(("aesgcm", "TrustedAccessInPlace", ACCEL, f">={CONVERGE_FROM}", 1))
    else:
        parts = [_ratio_check(idx, "large_buffer_convergence", s, CONVERGE_MIN, at_most=False) for s in large]
        if all(parts):
            failed = [p for p in parts if not p.passed]
            worst = min(parts, key=lambda p: p.margin if p.margin is not None else -1e9)
            checks.append(Check("large_buffer_convergence", "fail" if failed else "pass",
                                [cell for p in parts for cell in p.cells], worst.margin,
                                f"{len(parts) - len(failed)}/{len(parts)} sizes >= {CONVERGE_FROM} B "
                                f"within bound; worst: {worst.detail}"))

    below = idx.get("aesgcm", "TrustedEnclaveLocal", ACCEL, EPC_BELOW, 1)
    above = idx.get("aesgcm", "TrustedEnclaveLocal", ACCEL, EPC_ABOVE, 1)
    if below and above:
        checks.append(_errored("above_epc_collapse", [below, above])
                      or _bounded("above_epc_collapse", [below, above], above.mean_MBps / below.mean_MBps,
                                  COLLAPSE_MAX, True, f"TrustedEnclaveLocal {EPC_ABOVE} B / {EPC_BELOW} B"))

    peaks = {}
    for backend in (ACCEL, PORTABLE):
        recs = [r for r in records if r.workload == "aesgcm" and r.backend == backend
                and r.buffer_bytes == GAP_SIZE]
        if not recs:
            idx.missing.append(("aesgcm", "*", backend, GAP_SIZE, "*"))
        peaks[backend] = recs
    if peaks[ACCEL] and peaks[PORTABLE]:
        good = {b: [r for r in rs if not r.error] for b, rs in peaks.items()}
        if not good[ACCEL] or not good[PORTABLE]:
            checks.append(Check("backend_gap", "fail", [], None, "no successful 1 MiB cell for a backend"))
        else:
            pa = max(good[ACCEL], key=lambda r: r.mean_MBps)
            pp = max(good[PORTABLE], key=lambda r: r.mean_MBps)
            checks.append(_bounded("backend_gap", [pa, pp], pp.mean_MBps / pa.mean_MBps, BACKEND_GAP_MAX,
                                   True, f"portable/accelerated peak at {GAP_SIZE} B"))

    base = ("aesgcm", "UntrustedBaseline", ACCEL, SCALING_SIZE)
    t1 = idx.get(*base, 1)
    if cores >= SCALING_THREADS:
        t4 = idx.get(*base, SCALING_THREADS)
        if t1 and t4:
            checks.append(_errored("thread_scaling", [t1, t4])
                          or _bounded("thread_scaling", [t1, t4], t4.mean_MBps / t1.mean_MBps, SCALING_MIN,
                                      False, f"UntrustedBaseline {SCALING_THREADS}T/1T at {SCALING_SIZE} B"))
    else:
        checks.append(Check("thread_scaling", "n/a", [], None,
                            f"host has {cores} physical core(s); needs >= {SCALING_THREADS}"))

    counts = idx.threads(*base)
    ref_t = max([t for t in counts if t <= cores], default=None)
    beyond = [t for t in counts if t > cores]
    if t1 is not None and ref_t is not None and beyond:
        ref = idx.get(*base, ref_t)
        recs = [ref] + [idx.get(*base, t) for t in beyond]
        c = _errored("thread_plateau", recs)
        if c is None:
            worst = max(recs[1:], key=lambda r: r.mean_MBps)
            c = _bounded("thread_plateau", recs, worst.mean_MBps / ref.mean_MBps, PLATEAU_MAX, True,
                         f"best of threads {beyond} / threads={ref_t} (cores={cores})")
        checks.append(c)
    elif t1 is not None:
        checks.append(Check("thread_plateau", "n/a", [], None,
                            f"no thread count above the {cores} physical core(s) was measured"))

    if idx.missing:
        raise IncompleteMatrix("missing cells: " + "; ".join(map(str, idx.missing)))
    return ShapeReport(checks)
