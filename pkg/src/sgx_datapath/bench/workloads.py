"""Benchmark workloads: find_max in four placements and AES-GCM in three.

A workload is set up per thread with :meth:`prepare`, which returns a
zero-argument-plus-progress callable processing the thread's own buffer once.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..boundary import BufferPlacement as P
from ..boundary import Enclave
from ..emulator import EpcRegion, MiB, UntrustedBuffer
from ..engine import _CIPHERS, Backend, CryptoEngine, make_iv
from ..errors import EmptyInput

INT = np.dtype("<i4")
Progress = Callable[[int], None]
Op = Callable[[Progress | None], int]


class Workload(str, enum.Enum):
    FINDMAX = "findmax"
    AESGCM = "aesgcm"


class FindMaxVariant(str, enum.Enum):
    UNTRUSTED = "Untrusted"
    COPY_AND_COMPUTE = "CopyAndCompute"
    COMPUTE_ON_ENCLAVE_MEMORY = "ComputeOnEnclaveMemory"
    COMPUTE_ON_CLEARTEXT = "ComputeOnCleartext"


class AesVariant(str, enum.Enum):
    UNTRUSTED_BASELINE = "UntrustedBaseline"
    TRUSTED_ACCESS_IN_PLACE = "TrustedAccessInPlace"
    TRUSTED_ENCLAVE_LOCAL = "TrustedEnclaveLocal"


# the placement each variant gives its input buffer (None = no boundary crossing)
PLACEMENT = {
    FindMaxVariant.UNTRUSTED: None,
    FindMaxVariant.COPY_AND_COMPUTE: P.COPY_IN,
    FindMaxVariant.COMPUTE_ON_ENCLAVE_MEMORY: P.ENCLAVE_LOCAL,
    FindMaxVariant.COMPUTE_ON_CLEARTEXT: P.ACCESS_IN_PLACE,
    AesVariant.UNTRUSTED_BASELINE: None,
    AesVariant.TRUSTED_ACCESS_IN_PLACE: P.ACCESS_IN_PLACE,
    AesVariant.TRUSTED_ENCLAVE_LOCAL: P.ENCLAVE_LOCAL,
}

NO_BACKEND = "none"


def variants_for(workload: Workload | str) -> list:
    return list(FindMaxVariant) if Workload(workload) is Workload.FINDMAX else list(AesVariant)


def parse_variant(workload: Workload | str, name: str):
    cls = FindMaxVariant if Workload(workload) is Workload.FINDMAX else AesVariant
    try:
        return cls(name)
    except ValueError:
        raise ValueError(f"unknown {Workload(workload).value} variant {name!r}; "
                         f"choose from {[v.value for v in cls]}") from None


# ---------------------------------------------------------------------------
# find_max


def find_max(data, chunk: int | None = None, progress: Progress | None = None) -> int:
    """Maximum of the little-endian signed 4-byte integers in ``data``.

    Trailing bytes that do not fill an integer are ignored.
    """
    if isinstance(data, np.ndarray) and data.dtype == INT:
        arr = data
        n = len(arr)
    else:
        mv = memoryview(data).cast("B")
        n = len(mv) // 4
        arr = np.frombuffer(mv, dtype=INT, count=n)
    if n == 0:
        raise EmptyInput("need at least 4 bytes")
    if progress is None or chunk is None or n * 4 <= chunk:
        best = int(arr.max())
        if progress:
            progress(n * 4)
        return best
    step = chunk // 4
    best = None
    for lo in range(0, n, step):
        m = int(arr[lo:lo + step].max())
        best = m if best is None or m > best else best
        progress(min(step, n - lo) * 4)
    return best


def _find_max_region(region: EpcRegion, progress: Progress | None = None) -> int:
    n4 = len(region) // 4 * 4
    if n4 == 0:
        raise EmptyInput("need at least 4 bytes")
    best = None
    for v in region.views(0, n4):
        m = int(np.frombuffer(v, dtype=INT).max())
        best = m if best is None or m > best else best
        if progress:
            progress(len(v))
    return best


class FindMaxBench:
    """find_max wired to one enclave in all four placements."""

    # progress granularity for in-place scans; coarse enough to keep callbacks out of the profile
    chunk = 4 * MiB

    def __init__(self, enclave: Enclave):
        self.enclave = enclave
        reg = enclave.register_call
        self._h_copy = reg("findmax.copy_and_compute", [("array", P.COPY_IN)], self._t_region)
        self._h_local = reg("findmax.compute_on_enclave_memory", [("array", P.ENCLAVE_LOCAL)], self._t_region)
        self._h_in_place = reg("findmax.compute_on_cleartext", [("array", P.ACCESS_IN_PLACE)], self._t_in_place)
        self._h_prepare = reg("findmax.prepare", [("source", P.ACCESS_IN_PLACE)], self._t_prepare)

    def _t_region(self, region, progress=None):
        if not isinstance(region, EpcRegion):  # CopyIn of an empty buffer
            raise EmptyInput("need at least 4 bytes")
        return _find_max_region(region, progress)

    def _t_in_place(self, view: memoryview, progress=None):
        return find_max(view, self.chunk, progress)

    def _t_prepare(self, view: memoryview) -> EpcRegion:
        region = self.enclave.epc.alloc(len(view))
        region.write(view)
        return region

    def prepare_local(self, buf: UntrustedBuffer) -> EpcRegion:
        """Copy an array into enclave memory with its own ECALL, ahead of measurement."""
        if len(buf) < 4:
            raise EmptyInput("need at least 4 bytes")
        return self.enclave.call(self._h_prepare, buf)

    def run(self, variant: FindMaxVariant | str, buf: UntrustedBuffer, region: EpcRegion | None = None,
            progress: Progress | None = None) -> int:
        variant = FindMaxVariant(variant)
        if len(buf) < 4 and (variant is not FindMaxVariant.COMPUTE_ON_ENCLAVE_MEMORY or region is None):
            raise EmptyInput("need at least 4 bytes")
        if variant is FindMaxVariant.UNTRUSTED:
            return find_max(buf.view, self.chunk, progress)
        if variant is FindMaxVariant.COPY_AND_COMPUTE:
            return self.enclave.call(self._h_copy, buf, progress=progress)
        if variant is FindMaxVariant.COMPUTE_ON_CLEARTEXT:
            return self.enclave.call(self._h_in_place, buf, progress=progress)
        if region is None:
            raise ValueError("ComputeOnEnclaveMemory needs a prepared region")
        return self.enclave.call(self._h_local, region, progress=progress)

    def prepare(self, variant: FindMaxVariant | str, buf: UntrustedBuffer) -> Op:
        variant = FindMaxVariant(variant)
        region = self.prepare_local(buf) if variant is FindMaxVariant.COMPUTE_ON_ENCLAVE_MEMORY else None
        n = len(buf) // 4 * 4
        if variant is FindMaxVariant.UNTRUSTED:
            if n == 0:
                raise EmptyInput("need at least 4 bytes")
            # bound once so the timed loop carries no dispatch overhead
            arr = np.frombuffer(buf.view, dtype=INT, count=n // 4)
            chunk = self.chunk

            def untrusted_op(progress=None) -> int:
                if progress is None or n <= chunk:
                    arr.max()
                else:
                    find_max(arr, chunk, progress)
                return n
            return untrusted_op

        def op(progress=None) -> int:
            self.run(variant, buf, region, progress)
            return n
        return op


# ---------------------------------------------------------------------------
# AES-GCM


class AesBench:
    """AES-GCM encryption through one engine (one backend) on one enclave."""

    def __init__(self, enclave: Enclave, backend: Backend | str = Backend.ACCELERATED):
        self.enclave = enclave
        self.backend = Backend(backend)
        self.engine = CryptoEngine(enclave, self.backend, name=f"bench.{self.backend.value}")
        self.key_id = self.engine.generate_key()
        # the baseline runs the same cipher outside the enclave with its own key
        self._baseline_key = np.random.default_rng().bytes(16)
        self._lanes = itertools.count()
        self._h_prepare = enclave.register_call(
            f"bench.{self.backend.value}.prepare", [("source", P.ACCESS_IN_PLACE)], self._t_prepare)

    def _t_prepare(self, view: memoryview) -> EpcRegion:
        region = self.enclave.epc.alloc(len(view))
        region.write(view)
        return region

    def prepare(self, variant: AesVariant | str, buf: UntrustedBuffer) -> Op:
        variant = AesVariant(variant)
        n = len(buf)
        out = self.enclave.untrusted.alloc(n)
        out.view[:] = buf.view  # touch the output too
        if variant is AesVariant.UNTRUSTED_BASELINE:
            cipher = _CIPHERS[self.backend](self._baseline_key)
            lane = next(self._lanes)
            counter = itertools.count()
            src = [buf.view] if n else []

            def op(progress=None) -> int:
                iv = make_iv(lane, next(counter))
                cipher.encrypt_into(iv, b"", src, n, out.view, progress)
                return n
            return op

        if variant is AesVariant.TRUSTED_ACCESS_IN_PLACE:
            src = buf
        else:
            if n == 0:
                raise ValueError("TrustedEnclaveLocal needs a nonempty buffer")
            src = self.enclave.call(self._h_prepare, buf)
        engine, kid = self.engine, self.key_id

        def op(progress=None) -> int:
            engine.encrypt(kid, src, out=out, progress=progress)
            return n
        return op


@dataclass(frozen=True)
class Footprint:
    untrusted: int
    enclave: int

    @property
    def total(self) -> int:
        return self.untrusted + self.enclave


def footprint(workload: Workload | str, variant, size: int, threads: int) -> Footprint:
    """Rough per-cell memory need, used to skip cells that cannot fit."""
    variant = parse_variant(workload, variant.value if isinstance(variant, enum.Enum) else variant)
    placement = PLACEMENT[variant]
    if Workload(workload) is Workload.AESGCM:
        untrusted = 2 * size
    else:
        untrusted = size
    enclave = size if placement in (P.ENCLAVE_LOCAL, P.COPY_IN) else 0
    return Footprint(threads * untrusted, threads * enclave)
