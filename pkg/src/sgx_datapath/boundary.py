"""The call gate between untrusted code and trusted functions.

A trusted function is registered together with the placement of each buffer
parameter, much like an edl declaration.  Every crossing goes through
:meth:`CallGate.trusted_call`, which checks placements, materializes copied
buffers inside the enclave arena, charges the configured transition cost and
keeps counters.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .emulator import EpcArena, EpcConfig, EpcRegion, UntrustedArena, UntrustedBuffer, GiB
from .errors import DuplicateCall, PlacementViolation, UnknownCall


class BufferPlacement(enum.Enum):
    ACCESS_IN_PLACE = "AccessInPlace"  # edl user_check
    COPY_IN = "CopyIn"                 # edl in
    COPY_OUT = "CopyOut"               # edl out
    COPY_IN_OUT = "CopyInOut"          # edl in,out
    ENCLAVE_LOCAL = "EnclaveLocal"     # already inside the enclave

    @property
    def copies_in(self) -> bool:
        return self in (BufferPlacement.COPY_IN, BufferPlacement.COPY_IN_OUT)

    @property
    def copies_out(self) -> bool:
        return self in (BufferPlacement.COPY_OUT, BufferPlacement.COPY_IN_OUT)


@dataclass(frozen=True)
class GateConfig:
    transition_cost: float = 0.0  # seconds per enter+exit
    copy_bandwidth_limit: float | None = None  # bytes/second for CopyIn/CopyOut

    def __post_init__(self):
        if self.transition_cost < 0:
            raise ValueError("transition_cost must be >= 0")
        if self.copy_bandwidth_limit is not None and self.copy_bandwidth_limit <= 0:
            raise ValueError("copy_bandwidth_limit must be positive")


@dataclass(frozen=True)
class TransitionStats:
    calls: int = 0
    bytes_copied_in: int = 0
    bytes_copied_out: int = 0
    time_in_trusted: float = 0.0


@dataclass(frozen=True)
class CallHandle:
    name: str
    gate_id: int
    signature: tuple[tuple[str, BufferPlacement], ...]


def spin_until(deadline: float):
    # time.sleep cannot resolve microseconds
    while time.perf_counter() < deadline:
        pass


_gate_ids = itertools.count(1)


class CallGate:
    def __init__(self, epc: EpcArena, untrusted: UntrustedArena, config: GateConfig | None = None):
        self.epc = epc
        self.untrusted = untrusted
        self.config = config or GateConfig()
        self.id = next(_gate_ids)
        self._calls: dict[str, tuple] = {}
        self._reg_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._n = 0
        self._in = 0
        self._out = 0
        self._t = 0.0

    def register_call(self, name: str, signature: Sequence[tuple[str, BufferPlacement]],
                      func: Callable) -> CallHandle:
        """Declare a trusted entry point.  ``func`` receives one argument per parameter."""
        sig = tuple((str(role), BufferPlacement(p)) for role, p in signature)
        if not sig:
            raise ValueError("signature must declare at least one buffer parameter")
        with self._reg_lock:
            if name in self._calls:
                raise DuplicateCall(name)
            handle = CallHandle(name, self.id, sig)
            copies = any(p not in (BufferPlacement.ACCESS_IN_PLACE, BufferPlacement.ENCLAVE_LOCAL)
                         for _, p in sig)
            # (is_local, owner check, role) per parameter, resolved once
            checks = tuple((p is BufferPlacement.ENCLAVE_LOCAL,
                            self.epc.owns if p is BufferPlacement.ENCLAVE_LOCAL else self.untrusted.owns,
                            role) for role, p in sig)
            self._calls[name] = (handle, func, copies, checks)
        return handle

    def trusted_call(self, handle: CallHandle, *buffers, **kwargs):
        """Enter the enclave through ``handle``.

        Untrusted-side parameters must be :class:`UntrustedBuffer` objects of
        this gate's arena; EnclaveLocal parameters must be live regions of its
        enclave arena.  Extra keyword arguments are passed through as scalars.
        """
        entry = self._calls.get(getattr(handle, "name", None))
        if entry is None or entry[0] is not handle:
            raise UnknownCall(getattr(handle, "name", repr(handle)))
        _, func, copies, checks = entry
        if len(buffers) != len(checks):
            raise PlacementViolation(
                f"{handle.name} takes {len(checks)} buffers, got {len(buffers)}")
        args = []
        for (local, owns, role), buf in zip(checks, buffers):
            if not owns(buf):
                kind = "an enclave region" if local else "an untrusted buffer"
                raise PlacementViolation(f"{handle.name}.{role}: expected {kind}")
            args.append(buf if local else buf.view)

        start = time.perf_counter()
        if self.config.transition_cost:
            spin_until(start + self.config.transition_cost)
        if not copies:
            try:
                return func(*args, **kwargs)
            finally:
                elapsed = time.perf_counter() - start
                with self._stats_lock:
                    self._n += 1
                    self._t += elapsed

        sig = handle.signature
        local = BufferPlacement.ENCLAVE_LOCAL
        copied_in = copied_out = 0
        temps: list[tuple[BufferPlacement, UntrustedBuffer, EpcRegion | None]] = []
        args = []
        try:
            for (_, placement), buf in zip(sig, buffers):
                if placement is BufferPlacement.ACCESS_IN_PLACE:
                    args.append(buf.view)
                elif placement is local:
                    args.append(buf)
                else:
                    n = len(buf)
                    region = self.epc.alloc(n) if n else None
                    temps.append((placement, buf, region))
                    if placement.copies_in and region is not None:
                        t0 = time.perf_counter()
                        region.write(buf.view)
                        self._throttle(t0, n)
                        copied_in += n
                    args.append(region if region is not None else memoryview(b""))
            result = func(*args, **kwargs)
            for placement, buf, region in temps:
                if placement.copies_out and region is not None:
                    t0 = time.perf_counter()
                    pos = 0
                    for v in region.views():
                        buf.view[pos:pos + len(v)] = v
                        pos += len(v)
                    self._throttle(t0, len(buf))
                    copied_out += len(buf)
            return result
        finally:
            for _, _, region in temps:
                if region is not None:
                    region.free()
            elapsed = time.perf_counter() - start
            with self._stats_lock:
                self._n += 1
                self._in += copied_in
                self._out += copied_out
                self._t += elapsed

    def _throttle(self, t0: float, nbytes: int):
        limit = self.config.copy_bandwidth_limit
        if limit:
            spin_until(t0 + nbytes / limit)

    def stats(self) -> TransitionStats:
        with self._stats_lock:
            return TransitionStats(self._n, self._in, self._out, self._t)

    def reset_stats(self):
        with self._stats_lock:
            self._n = self._in = self._out = 0
            self._t = 0.0


class Enclave:
    """An emulated enclave: untrusted arena, enclave arena and the gate between them."""

    def __init__(self, epc_config: EpcConfig | None = None, gate_config: GateConfig | None = None,
                 untrusted_capacity: int = 4 * GiB):
        self.untrusted = UntrustedArena(untrusted_capacity)
        self.epc = EpcArena(epc_config or EpcConfig(), self.untrusted)
        self.gate = CallGate(self.epc, self.untrusted, gate_config)

    def register_call(self, name, signature, func) -> CallHandle:
        return self.gate.register_call(name, signature, func)

    def call(self, handle: CallHandle, *buffers, **kwargs):
        return self.gate.trusted_call(handle, *buffers, **kwargs)

    def scan_untrusted(self, needle):
        return self.untrusted.scan(needle)

    def close(self):
        """Release every buffer, region and sealed page held by this enclave."""
        self.epc.close()
        self.untrusted.clear()
