"""Emulated enclave memory.

Two arenas live here.  :class:`UntrustedArena` is ordinary process memory that
holds every untrusted-side buffer, plus the sealed copies of evicted enclave
pages; it can be enumerated and scanned for secrets.  :class:`EpcArena` is the
protected page cache: a fixed pool of page frames with a hard byte budget.
Regions may be larger than the budget; pages that do not fit are sealed with
AES-128-GCM under an arena-private key and parked in the untrusted arena until
they are touched again.
"""

from __future__ import annotations

import collections
import enum
import itertools
import os
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import BoundsError, IntegrityError, OutOfEmulatedMemory

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

SEAL_NONCE_BYTES = 12
SEAL_TAG_BYTES = 16
SEAL_OVERHEAD = SEAL_NONCE_BYTES + SEAL_TAG_BYTES
MIN_NEEDLE = 16

_INT64_MAX = np.iinfo(np.int64).max


class EvictionPolicy(str, enum.Enum):
    CLOCK = "clock"
    LRU = "lru"


@dataclass(frozen=True)
class EpcConfig:
    budget_bytes: int = 96 * MiB
    page_size: int = 4096
    eviction_policy: EvictionPolicy = EvictionPolicy.CLOCK
    # total bytes of live regions, resident or not
    emulation_cap_bytes: int = 1 * GiB

    def __post_init__(self):
        object.__setattr__(self, "eviction_policy", EvictionPolicy(self.eviction_policy))
        if self.page_size <= 0 or self.page_size % 16:
            raise ValueError("page_size must be a positive multiple of 16")
        if self.budget_bytes <= 0 or self.budget_bytes % self.page_size:
            raise ValueError("budget_bytes must be a positive multiple of page_size")
        if self.emulation_cap_bytes < self.budget_bytes:
            raise ValueError("emulation_cap_bytes must be at least budget_bytes")


@dataclass(frozen=True)
class PagingStats:
    evictions: int = 0
    loads: int = 0
    seal_bytes: int = 0
    unseal_bytes: int = 0


@dataclass(frozen=True)
class Location:
    area: str  # "buffer" or "sealed"
    ident: object
    offset: int


@dataclass(frozen=True)
class ScanResult:
    found: bool
    locations: tuple[Location, ...] = ()

    def __bool__(self):
        return self.found


# ---------------------------------------------------------------------------
# untrusted memory


class _FairLock:
    """A FIFO lock: on release, ownership passes straight to the oldest waiter.

    ``threading.Lock`` lets the releasing thread re-acquire before a woken
    waiter runs; with many GIL-bound threads hammering the page cache that can
    starve one of them indefinitely.
    """

    def __init__(self):
        self._mutex = threading.Lock()
        self._held = False
        self._waiters: collections.deque = collections.deque()

    def acquire(self, blocking: bool = True) -> bool:
        with self._mutex:
            if not self._held:
                self._held = True
                return True
            if not blocking:
                return False
            gate = threading.Lock()
            gate.acquire()
            self._waiters.append(gate)
        gate.acquire()
        return True

    def release(self):
        with self._mutex:
            if self._waiters:
                self._waiters.popleft().release()
            else:
                self._held = False

    __enter__ = acquire

    def __exit__(self, *exc):
        self.release()


ALIGN = 64


def _aligned_zeros(size: int) -> np.ndarray:
    # cache-line aligned like a real allocator; unaligned starts skew SIMD throughput
    raw = np.zeros(size + ALIGN, dtype=np.uint8)
    off = -raw.ctypes.data % ALIGN
    return raw[off:off + size]


class UntrustedBuffer:
    """A buffer in general (untrusted) memory, owned by an :class:`UntrustedArena`."""

    __slots__ = ("_arena", "id", "_data", "view")

    def __init__(self, arena: "UntrustedArena", bid: int, size: int):
        self._arena = arena
        self.id = bid
        self._data = _aligned_zeros(size)
        self.view = memoryview(self._data)

    def __len__(self):
        return len(self._data) if self._data is not None else 0

    def __repr__(self):
        return f"UntrustedBuffer(id={self.id}, size={len(self)})"

    @property
    def arena(self):
        return self._arena

    @property
    def alive(self) -> bool:
        return self._data is not None

    def array(self, dtype=np.uint8) -> np.ndarray:
        """Writable numpy view; trailing bytes that do not fill an element are dropped."""
        dt = np.dtype(dtype)
        return np.frombuffer(self._data, dtype=dt, count=len(self._data) // dt.itemsize)

    def tobytes(self) -> bytes:
        return self._data.tobytes()

    def free(self):
        self._arena.free(self)


class UntrustedArena:
    """Bounded, enumerable general memory.

    Everything the untrusted side holds (client buffers, ciphertext, channel
    records, sealed enclave pages) is allocated here so a scan can prove that
    a secret never landed outside the enclave.
    """

    def __init__(self, capacity_bytes: int = 4 * GiB):
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._buffers: dict[int, UntrustedBuffer] = {}
        self._sealed: dict[object, bytes] = {}
        self._in_use = 0

    @property
    def bytes_in_use(self) -> int:
        return self._in_use

    def _reserve(self, n: int):
        if self._in_use + n > self.capacity_bytes:
            raise OutOfEmulatedMemory(
                f"untrusted arena full: {self._in_use} + {n} > {self.capacity_bytes}")
        self._in_use += n

    def alloc(self, size: int) -> UntrustedBuffer:
        if size < 0:
            raise ValueError("size must be non-negative")
        with self._lock:
            self._reserve(size)
            buf = UntrustedBuffer(self, next(self._ids), size)
            self._buffers[buf.id] = buf
        return buf

    def from_bytes(self, data) -> UntrustedBuffer:
        mv = memoryview(data).cast("B")
        buf = self.alloc(len(mv))
        buf.view[:] = mv
        return buf

    def free(self, buf: UntrustedBuffer):
        with self._lock:
            if self._buffers.pop(buf.id, None) is None:
                return
            self._in_use -= len(buf)
        buf._data = None
        buf.view = memoryview(b"")

    def owns(self, buf) -> bool:
        return isinstance(buf, UntrustedBuffer) and buf._arena is self and buf.alive

    def clear(self):
        """Free every buffer and sealed blob."""
        for buf in self.buffers():
            self.free(buf)
        with self._lock:
            self._sealed.clear()
            self._in_use = 0

    def buffers(self) -> list[UntrustedBuffer]:
        with self._lock:
            return list(self._buffers.values())

    # sealed page store -----------------------------------------------------

    def put_sealed(self, key, blob: bytes):
        with self._lock:
            old = self._sealed.get(key)
            self._reserve(len(blob) - (len(old) if old is not None else 0))
            self._sealed[key] = blob

    def get_sealed(self, key) -> bytes | None:
        return self._sealed.get(key)

    def drop_sealed(self, key):
        with self._lock:
            old = self._sealed.pop(key, None)
            if old is not None:
                self._in_use -= len(old)

    def sealed_keys(self) -> list:
        with self._lock:
            return list(self._sealed)

    def overwrite_sealed(self, key, blob: bytes):
        """Replace a sealed blob in place, as an attacker with memory access could."""
        if key not in self._sealed:
            raise KeyError(key)
        self.put_sealed(key, bytes(blob))

    # scanning --------------------------------------------------------------

    def _haystacks(self):
        for buf in self.buffers():
            data = buf._data
            if data is not None:
                yield Location("buffer", buf.id, 0), data.tobytes()
        with self._lock:
            sealed = list(self._sealed.items())
        for key, blob in sealed:
            yield Location("sealed", key, 0), blob

    def scan(self, needle) -> ScanResult:
        """Exhaustively search every untrusted byte for ``needle`` (at least 16 bytes)."""
        needle = bytes(needle)
        if len(needle) < MIN_NEEDLE:
            raise ValueError(f"needle must be at least {MIN_NEEDLE} bytes")
        hits = []
        for loc, hay in self._haystacks():
            pos = hay.find(needle)
            while pos >= 0:
                hits.append(Location(loc.area, loc.ident, pos))
                pos = hay.find(needle, pos + 1)
        return ScanResult(bool(hits), tuple(hits))

    def scan_windows(self, payloads, window: int = MIN_NEEDLE) -> ScanResult:
        """Report any ``window``-byte substring of any payload present in untrusted memory."""
        hits = []
        index = WindowIndex(payloads, window)
        for loc, hay in self._haystacks():
            for off, _, _ in index.search(hay):
                hits.append(Location(loc.area, loc.ident, off))
        return ScanResult(bool(hits), tuple(hits))


_FILTER_MASK = (1 << 23) - 1


class WindowIndex:
    """Index of payloads for repeated ``window``-byte substring searches.

    Any match of ``window`` >= 16 bytes contains one 8-byte-aligned block of
    the payload, so candidates come from looking up every unaligned 8-byte
    word of a haystack among the sorted aligned payload words, and are then
    confirmed byte by byte.
    """

    def __init__(self, payloads, window: int = MIN_NEEDLE):
        if window < MIN_NEEDLE:
            raise ValueError(f"window must be at least {MIN_NEEDLE} bytes")
        self.window = window
        self.payloads = [bytes(p) for p in payloads]
        words, owner, offset = [], [], []
        for pi, p in enumerate(self.payloads):
            if len(p) < window:
                continue
            n = len(p) // 8
            words.append(np.frombuffer(p, dtype="<u8", count=n))
            owner.append(np.full(n, pi, dtype=np.int64))
            offset.append(np.arange(0, 8 * n, 8, dtype=np.int64))
        if words:
            w = np.concatenate(words)
            order = np.argsort(w, kind="stable")
            self._keys = w[order]
            self._owner = np.concatenate(owner)[order]
            self._offset = np.concatenate(offset)[order]
            # bitmap over the low bits screens out most haystack words cheaply
            self._filter = np.zeros(_FILTER_MASK + 1, dtype=bool)
            self._filter[self._keys & _FILTER_MASK] = True
        else:
            self._keys = np.empty(0, dtype=np.uint64)

    def search(self, haystack) -> list[tuple[int, int, int]]:
        """Sorted ``(haystack_offset, payload_index, payload_offset)`` triples."""
        hay = memoryview(haystack).cast("B")
        keys, window = self._keys, self.window
        if len(hay) < window or not len(keys):
            return []
        found = set()
        for r in range(8):
            count = (len(hay) - r) // 8
            if count <= 0:
                continue
            words = np.frombuffer(hay, dtype="<u8", count=count, offset=r)
            cand = np.flatnonzero(self._filter[words & _FILTER_MASK])
            lo = np.searchsorted(keys, words[cand], side="left")
            hit = keys[np.minimum(lo, len(keys) - 1)] == words[cand]
            for c in np.flatnonzero(hit).tolist():
                k = int(cand[c])
                pos = r + 8 * k
                hi = int(np.searchsorted(keys, words[k], side="right"))
                for e in range(int(lo[c]), hi):
                    pi, j = int(self._owner[e]), int(self._offset[e])
                    p = self.payloads[pi]
                    for i in range(max(0, j - 7), j + 1):
                        if i + window > len(p):
                            break
                        start = pos - (j - i)
                        if start < 0 or start + window > len(hay):
                            continue
                        if hay[start:start + window] == p[i:i + window]:
                            found.add((start, pi, i))
        return sorted(found)


def find_windows(haystack, payloads, window: int = MIN_NEEDLE) -> list[tuple[int, int, int]]:
    """Find every place a ``window``-byte slice of some payload occurs in ``haystack``.

    Returns ``(haystack_offset, payload_index, payload_offset)`` triples.
    """
    return WindowIndex(payloads, window).search(haystack)


# ---------------------------------------------------------------------------
# protected memory


class EpcRegion:
    """Handle to a region of enclave memory; the bytes live in the owning arena."""

    def __init__(self, arena: "EpcArena", rid: int, size: int, npages: int):
        self.arena = arena
        self.rid = rid
        self.size = size
        self.npages = npages
        self.live = True
        self.frames = np.full(npages, -1, dtype=np.int64)
        self.sealed = np.zeros(npages, dtype=bool)
        self.busy = np.zeros(npages, dtype=bool)

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"EpcRegion(rid={self.rid}, size={self.size}, pages={self.npages})"

    def read(self, offset: int = 0, length: int | None = None) -> bytes:
        return self.arena.access(self, offset, self.size - offset if length is None else length, "read")

    def write(self, data, offset: int = 0):
        self.arena.access(self, offset, len(memoryview(data).cast("B")), "write", data)

    def views(self, offset: int = 0, length: int | None = None, chunk: int = MiB):
        return self.arena.views(self, offset, self.size - offset if length is None else length, chunk)

    def free(self):
        self.arena.free(self)


class EpcArena:
    """Byte-budgeted page cache with sealing on eviction.

    Page-table state is guarded by one condition variable, but sealing and
    unsealing run outside it, so faults on distinct pages overlap.  A page in
    transit is marked busy; other threads touching it wait.  Frames handed out
    to callers are pinned until the caller is done with them.
    """

    def __init__(self, config: EpcConfig | None = None, untrusted: UntrustedArena | None = None):
        self.config = config or EpcConfig()
        self.untrusted = untrusted if untrusted is not None else UntrustedArena()
        self.page_size = self.config.page_size
        self.nframes = self.config.budget_bytes // self.page_size
        self._uid = os.urandom(8)
        self._uid_hex = self._uid.hex()
        self._paging = AESGCM(AESGCM.generate_key(128))
        self._pool = np.zeros(self.config.budget_bytes, dtype=np.uint8)
        self._pool2d = self._pool.reshape(self.nframes, self.page_size)
        self._mv = memoryview(self._pool)
        self._owner_rid = np.full(self.nframes, -1, dtype=np.int64)
        self._owner_idx = np.full(self.nframes, -1, dtype=np.int64)
        self._pins = np.zeros(self.nframes, dtype=np.int32)
        self._stamp = np.zeros(self.nframes, dtype=np.int64)
        self._ref = np.zeros(self.nframes, dtype=bool)
        # maintained incrementally: occupied and unpinned frames
        self._evictable = np.zeros(self.nframes, dtype=bool)
        self._lru_key = np.full(self.nframes, _INT64_MAX, dtype=np.int64)
        self._tick = 1
        self._hand = 0
        self._free = self.nframes
        self._cond = threading.Condition(_FairLock())
        self._regions: dict[int, EpcRegion] = {}
        self._rids = itertools.count(1)
        self._allocated = 0
        self._evictions = self._loads = self._seal_bytes = self._unseal_bytes = 0
        self._victim_log: list[tuple[int, int]] | None = None

    # bookkeeping -----------------------------------------------------------

    @property
    def resident_bytes(self) -> int:
        return (self.nframes - self._free) * self.page_size

    @property
    def allocated_bytes(self) -> int:
        return self._allocated

    def paging_stats(self) -> PagingStats:
        with self._cond:
            return PagingStats(self._evictions, self._loads, self._seal_bytes, self._unseal_bytes)

    def reset_paging_stats(self):
        with self._cond:
            self._evictions = self._loads = self._seal_bytes = self._unseal_bytes = 0

    def record_victims(self, enabled: bool = True):
        """Start (or stop) logging evicted (region id, page index) pairs, in order."""
        with self._cond:
            self._victim_log = [] if enabled else None

    @property
    def victim_log(self) -> list[tuple[int, int]]:
        return list(self._victim_log or ())

    def owns(self, region) -> bool:
        return isinstance(region, EpcRegion) and region.arena is self and region.live

    def resident_pages(self, region: EpcRegion) -> int:
        with self._cond:
            return int((region.frames >= 0).sum())

    # allocation ------------------------------------------------------------

    def alloc(self, size: int) -> EpcRegion:
        if size <= 0:
            raise ValueError("size must be positive")
        npages = -(-size // self.page_size)
        with self._cond:
            need = npages * self.page_size
            if self._allocated + need > self.config.emulation_cap_bytes:
                raise OutOfEmulatedMemory(
                    f"emulation cap exceeded: {self._allocated} + {need} > "
                    f"{self.config.emulation_cap_bytes}")
            self._allocated += need
            region = EpcRegion(self, next(self._rids), size, npages)
            self._regions[region.rid] = region
        return region

    def free(self, region: EpcRegion):
        with self._cond:
            if not region.live:
                return
            while region.busy.any():
                self._cond.wait()
            region.live = False
            fr = region.frames[region.frames >= 0]
            if (self._pins[fr] > 0).any():
                region.live = True
                raise RuntimeError("region freed while in use")
            self._release_frames(fr)
            region.frames[:] = -1
            sealed_idx = np.flatnonzero(region.sealed).tolist()
            region.sealed[:] = False
            self._allocated -= region.npages * self.page_size
            del self._regions[region.rid]
            self._cond.notify_all()
        for i in sealed_idx:
            self.untrusted.drop_sealed(self._blob_key(region.rid, i))

    def close(self):
        """Free every region and give the frame pool back; the arena is unusable afterwards."""
        for region in list(self._regions.values()):
            try:
                self.free(region)
            except RuntimeError:
                pass
        self.nframes = 0
        self._pool = self._pool2d = None
        self._mv = memoryview(b"")

    # sealing ---------------------------------------------------------------

    def _blob_key(self, rid: int, idx: int):
        return ("epc", self._uid_hex, rid, idx)

    def _aad(self, rid: int, idx: int) -> bytes:
        return self._uid + rid.to_bytes(8, "little") + idx.to_bytes(8, "little")

    def _seal(self, frame: int, rid: int, idx: int) -> bytes:
        nonce = os.urandom(SEAL_NONCE_BYTES)
        page = self._mv[frame * self.page_size:(frame + 1) * self.page_size]
        return nonce + self._paging.encrypt(nonce, page, self._aad(rid, idx))

    def _unseal_into(self, blob: bytes, frame: int, rid: int, idx: int):
        try:
            page = self._paging.decrypt(blob[:SEAL_NONCE_BYTES], blob[SEAL_NONCE_BYTES:],
                                        self._aad(rid, idx))
        except InvalidTag:
            raise IntegrityError(f"sealed page {idx} of region {rid} failed authentication") from None
        if len(page) != self.page_size:
            raise IntegrityError("sealed page has wrong length")
        self._pool2d[frame] = np.frombuffer(page, dtype=np.uint8)

    # replacement -----------------------------------------------------------

    def _touch(self, frames: np.ndarray):
        if self.config.eviction_policy is EvictionPolicy.LRU:
            n = len(frames)
            self._stamp[frames] = np.arange(self._tick, self._tick + n, dtype=np.int64)
            self._tick += n
        else:
            self._ref[frames] = True

    def _pin1(self, f: int):
        # scalar twins of _pin/_touch; one-element fancy indexing is several times slower
        self._pins[f] += 1
        self._evictable[f] = False
        self._lru_key[f] = _INT64_MAX

    def _touch1(self, f: int):
        if self.config.eviction_policy is EvictionPolicy.LRU:
            self._stamp[f] = self._tick
            self._tick += 1
        else:
            self._ref[f] = True

    def _pin(self, frames: np.ndarray):
        self._pins[frames] += 1
        self._evictable[frames] = False
        self._lru_key[frames] = _INT64_MAX

    def _unpin_locked(self, frames: np.ndarray):
        self._pins[frames] -= 1
        idle = frames[self._pins[frames] == 0]
        idle = idle[self._owner_rid[idle] >= 0]
        self._evictable[idle] = True
        self._lru_key[idle] = self._stamp[idle]

    def _release_frames(self, frames: np.ndarray):
        self._owner_rid[frames] = -1
        self._owner_idx[frames] = -1
        self._ref[frames] = False
        self._evictable[frames] = False
        self._lru_key[frames] = _INT64_MAX
        self._pool2d[frames] = 0
        self._free += len(frames)

    def _pick_victim(self) -> int:
        if self.config.eviction_policy is EvictionPolicy.LRU:
            f = int(self._lru_key.argmin())
            return f if self._evictable[f] else -1
        # second chance: sweep from the hand, clearing reference bits of
        # evictable frames on the way; pinned frames are skipped untouched
        n = self.nframes
        h = self._hand
        for lo, hi in ((h, n), (0, h), (h, n), (0, h)):
            step = 64
            while lo < hi:
                top = min(hi, lo + step)
                ev = self._evictable[lo:top]
                cand = ev & ~self._ref[lo:top]
                i = int(cand.argmax())
                if cand[i]:
                    seg = self._ref[lo:lo + i]
                    seg &= ~ev[:i]
                    self._hand = (lo + i + 1) % n
                    return lo + i
                seg = self._ref[lo:top]
                seg &= ~ev
                lo = top
                step *= 4
        return -1

    def _claim_frame(self, rid: int, idx: int):
        """Reserve a frame for (rid, idx); caller holds the lock.  Returns (frame, victim)."""
        while True:
            if self._free:
                f = int((self._owner_rid < 0).argmax())
                self._free -= 1
                victim = None
                break
            f = self._pick_victim()
            if f >= 0:
                vr, vi = int(self._owner_rid[f]), int(self._owner_idx[f])
                vregion = self._regions[vr]
                vregion.frames[vi] = -1
                vregion.busy[vi] = True
                victim = (vregion, vi)
                if self._victim_log is not None:
                    self._victim_log.append((vr, vi))
                break
            self._cond.wait()
        self._owner_rid[f] = rid
        self._owner_idx[f] = idx
        self._pin1(f)
        return f, victim

    def _fault_page(self, region: EpcRegion, idx: int) -> int:
        """Make one page resident and pinned; returns its frame."""
        with self._cond:
            while True:
                if not region.live:
                    raise BoundsError("region has been freed")
                f = int(region.frames[idx])
                if f >= 0:
                    self._pin1(f)
                    self._touch1(f)
                    return f
                if not region.busy[idx]:
                    break
                self._cond.wait()
            region.busy[idx] = True
            f, victim = self._claim_frame(region.rid, idx)
            blob = self.untrusted.get_sealed(self._blob_key(region.rid, idx)) if region.sealed[idx] else None

        sealed_victim = None
        err = None
        try:
            if victim is not None:
                vregion, vi = victim
                sealed_victim = self._seal(f, vregion.rid, vi)
            if blob is not None:
                self._unseal_into(blob, f, region.rid, idx)
            else:
                self._pool2d[f] = 0
        except IntegrityError as e:
            err = e

        with self._cond:
            if victim is not None:
                vregion, vi = victim
                if vregion.live:
                    self.untrusted.put_sealed(self._blob_key(vregion.rid, vi), sealed_victim)
                    vregion.sealed[vi] = True
                vregion.busy[vi] = False
                self._evictions += 1
                self._seal_bytes += len(sealed_victim)
            region.busy[idx] = False
            if err is not None:
                one = np.array([f])
                self._pins[one] -= 1
                self._release_frames(one)
                self._cond.notify_all()
                raise err
            if blob is not None:
                self.untrusted.drop_sealed(self._blob_key(region.rid, idx))
                region.sealed[idx] = False
                self._unseal_bytes += len(blob)
            region.frames[idx] = f
            self._loads += 1
            self._touch1(f)
            self._cond.notify_all()
        return f

    def _pin_range(self, region: EpcRegion, lo: int, hi: int) -> np.ndarray:
        """Pin pages [lo, hi) of a region, faulting as needed; returns their frames."""
        with self._cond:
            if not region.live:
                raise BoundsError("region has been freed")
            fr = region.frames[lo:hi]
            missing = fr < 0
            if not missing.any():
                fr = fr.copy()
                self._pin(fr)
                self._touch(fr)
                return fr
            k = int(missing.sum())
            fresh = not (region.sealed[lo:hi] & missing).any() and not region.busy[lo:hi].any()
            if fresh and k <= self._free:
                # every missing page is a never-written page and there is room: no eviction
                free_frames = np.flatnonzero(self._owner_rid < 0)[:k]
                pages = lo + np.flatnonzero(missing)
                self._owner_rid[free_frames] = region.rid
                self._owner_idx[free_frames] = pages
                self._pool2d[free_frames] = 0
                region.frames[pages] = free_frames
                self._free -= k
                self._loads += k
                fr = region.frames[lo:hi].copy()
                self._pin(fr)
                self._touch(fr)
                return fr
        out = np.empty(hi - lo, dtype=np.int64)
        done = 0
        try:
            for i in range(lo, hi):
                out[i - lo] = self._fault_page(region, i)
                done += 1
        except BaseException:
            self._unpin(out[:done])
            raise
        return out

    def _unpin(self, frames: np.ndarray):
        if len(frames) == 0:
            return
        with self._cond:
            self._unpin_locked(frames)
            self._cond.notify_all()

    # access ----------------------------------------------------------------

    def _check(self, region: EpcRegion, offset: int, length: int):
        if not self.owns(region):
            raise BoundsError("not a live region of this arena")
        if offset < 0 or length < 0 or offset + length > region.size:
            raise BoundsError(f"[{offset}, {offset + length}) outside region of {region.size} bytes")

    def views(self, region: EpcRegion, offset: int, length: int,
              chunk: int = MiB) -> Iterator[memoryview]:
        """Yield writable views covering ``[offset, offset+length)`` of a region, in order.

        Each view spans physically contiguous frames.  Pages stay pinned until
        the generator advances past the chunk they belong to, so consumers must
        not keep views beyond that point.
        """
        self._check(region, offset, length)
        ps = self.page_size
        chunk_pages = max(1, min(chunk // ps, self.nframes // 4 or 1))
        pos, end = offset, offset + length
        while pos < end:
            lo = pos // ps
            hi = min(lo + chunk_pages, -(-end // ps))
            cend = min(end, hi * ps)
            frames = self._pin_range(region, lo, hi)
            try:
                breaks = np.flatnonzero(np.diff(frames) != 1) + 1
                starts = np.concatenate(([0], breaks)).tolist()
                stops = np.concatenate((breaks, [len(frames)])).tolist()
                fl = frames.tolist()
                for a, b in zip(starts, stops):
                    run_lo = max(pos, (lo + a) * ps)
                    run_hi = min(cend, (lo + b) * ps)
                    base = fl[a] * ps - (lo + a) * ps
                    yield self._mv[base + run_lo:base + run_hi]
            finally:
                self._unpin(frames)
            pos = cend

    def access(self, region: EpcRegion, offset: int, length: int, mode: str = "read", data=None):
        """Read or write bytes of a region, faulting pages in as needed."""
        if mode == "read":
            out = bytearray(length)
            pos = 0
            for v in self.views(region, offset, length):
                out[pos:pos + len(v)] = v
                pos += len(v)
            return bytes(out)
        if mode == "write":
            src = memoryview(data).cast("B")
            if len(src) != length:
                raise ValueError("data length does not match length")
            pos = 0
            for v in self.views(region, offset, length):
                v[:] = src[pos:pos + len(v)]
                pos += len(v)
            return None
        raise ValueError(f"unknown access mode {mode!r}")
