"""Storage write/read paths and the at-rest block store.

On-disk block layout (integers little-endian)::

    magic "ENCDPTH1" (8) | version (2) | key_id (4) | payload_len (8) | iv (12) | tag (16) | ciphertext

The first 22 bytes are the AAD of the payload record, so changing the key id
or length is caught by the tag check.
"""

from __future__ import annotations

import enum
import os
import re
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .boundary import BufferPlacement as P
from .channel import RECORD_OVERHEAD, ChannelServer, ServerSession
from .emulator import MiB, UntrustedBuffer
from .engine import CryptoEngine, SealedRecord
from .errors import AuthError, IntegrityError, RecordRejected, StoreError, UnknownKey

MAGIC = b"ENCDPTH1"
VERSION = 1
_AAD = struct.Struct("<8sHIQ")
_HEADER = struct.Struct("<8sHIQ12s16s")
AAD_BYTES = _AAD.size  # 22
HEADER_BYTES = _HEADER.size  # 50
_FRAME = struct.Struct(">I")
_NAME = re.compile(r"^(\d{16})\.blk$")


class SecurityMode(str, enum.Enum):
    KEY_PROTECTION = "KeyProtection"
    END_TO_END = "EndToEnd"


@dataclass(frozen=True)
class BlockHeader:
    key_id: int
    payload_len: int
    iv: bytes
    tag: bytes
    magic: bytes = MAGIC
    version: int = VERSION

    def aad(self) -> bytes:
        return header_aad(self.key_id, self.payload_len)

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.key_id, self.payload_len, self.iv, self.tag)

    @classmethod
    def unpack(cls, data: bytes) -> "BlockHeader":
        if len(data) < HEADER_BYTES:
            raise IntegrityError("block shorter than its header")
        magic, version, key_id, n, iv, tag = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise IntegrityError("bad block magic")
        if version != VERSION:
            raise IntegrityError(f"unsupported block version {version}")
        return cls(key_id, n, iv, tag, magic, version)


def header_aad(key_id: int, payload_len: int) -> bytes:
    return _AAD.pack(MAGIC, VERSION, key_id, payload_len)


@dataclass(frozen=True)
class ObjectRef:
    store_path: str
    index: int


class BlockStore:
    """A directory holding one object per file, named by a 16-digit index."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreError(f"cannot open store {self.path}: {exc}") from exc
        self._lock = threading.Lock()
        existing = self.indices()
        self._next = existing[-1] + 1 if existing else 0

    def indices(self) -> list[int]:
        try:
            names = os.listdir(self.path)
        except OSError as exc:
            raise StoreError(str(exc)) from exc
        return sorted(int(m.group(1)) for m in map(_NAME.match, names) if m)

    def file_for(self, index: int) -> Path:
        return self.path / f"{index:016d}.blk"

    def ref(self, index: int) -> ObjectRef:
        return ObjectRef(str(self.path.resolve()), index)

    def _reserve(self) -> int:
        # O_EXCL placeholder so concurrent writers (even other processes) never share an index
        with self._lock:
            while True:
                idx = self._next
                self._next += 1
                try:
                    fd = os.open(self.file_for(idx), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                except FileExistsError:
                    continue
                os.close(fd)
                return idx

    def put(self, parts: Iterable) -> ObjectRef:
        try:
            idx = self._reserve()
            fd, tmp = tempfile.mkstemp(dir=self.path, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    for part in parts:
                        f.write(part)
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, self.file_for(idx))
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise StoreError(f"write failed: {exc}") from exc
        return self.ref(idx)

    def get(self, ref: ObjectRef) -> bytes:
        self._check_ref(ref)
        try:
            return self.file_for(ref.index).read_bytes()
        except OSError as exc:
            raise StoreError(f"read failed: {exc}") from exc

    def _check_ref(self, ref: ObjectRef):
        if Path(ref.store_path).resolve() != self.path.resolve():
            raise StoreError(f"{ref} belongs to another store")


def frame_records(records: Iterable[bytes]) -> bytes:
    """Concatenate records, each prefixed by its 4-byte big-endian length."""
    return b"".join(_FRAME.pack(len(r)) + bytes(r) for r in records)


def unframe_records(stream) -> list[memoryview]:
    mv = memoryview(stream).cast("B")
    out, pos = [], 0
    while pos < len(mv):
        if pos + _FRAME.size > len(mv):
            raise ValueError("truncated record frame")
        (n,) = _FRAME.unpack_from(mv, pos)
        pos += _FRAME.size
        if pos + n > len(mv):
            raise ValueError("truncated record frame")
        out.append(mv[pos:pos + n])
        pos += n
    return out


class DataPath:
    """Object writes and reads in KeyProtection or EndToEnd mode.

    ``probe``, when given, is invoked inside the enclave while an EndToEnd
    payload is held in plaintext; tests use it to scan untrusted memory
    mid-call.
    """

    def __init__(self, engine: CryptoEngine, store: BlockStore, channel: ChannelServer | None = None,
                 record_size: int = MiB, probe: Callable[[], None] | None = None, name: str = "datapath"):
        self.engine = engine
        self.enclave = engine.enclave
        self.store = store
        self.channel = channel
        self.record_size = record_size
        self.probe = probe
        reg = self.enclave.register_call
        self._h_write = reg(f"{name}.e2e_write", [("records", P.ACCESS_IN_PLACE),
                                                  ("ciphertext", P.ACCESS_IN_PLACE)], self._t_e2e_write)
        self._h_read = reg(f"{name}.e2e_read", [("ciphertext", P.ACCESS_IN_PLACE),
                                                ("records", P.ACCESS_IN_PLACE)], self._t_e2e_read)

    # -- trusted functions ---------------------------------------------------

    def _t_e2e_write(self, stream: memoryview, out: memoryview, session: ServerSession,
                     key_id: int, payload_len: int):
        region = self.enclave.epc.alloc(payload_len) if payload_len else None
        try:
            pos = 0
            for wire in unframe_records(stream):
                plain = session.open_record(wire)
                if pos + len(plain) > payload_len:
                    raise ValueError("records exceed the declared payload length")
                if plain:
                    region.write(plain, pos)
                pos += len(plain)
            if pos != payload_len:
                raise ValueError("records fall short of the declared payload length")
            if self.probe:
                self.probe()
            views = region.views() if region is not None else []
            return self.engine.trusted_encrypt(key_id, views, payload_len, out,
                                               header_aad(key_id, payload_len))
        finally:
            if region is not None:
                region.free()

    def _t_e2e_read(self, ct: memoryview, out: memoryview, session: ServerSession, key_id: int,
                    iv: bytes, tag: bytes, aad: bytes):
        plain = self.engine.trusted_decrypt(key_id, iv, ct, tag, aad)
        if self.probe:
            self.probe()
        pos = 0
        for piece in _pieces(len(plain), self.record_size):
            wire = session.seal_record(memoryview(plain)[piece])
            out[pos:pos + _FRAME.size] = _FRAME.pack(len(wire))
            pos += _FRAME.size
            out[pos:pos + len(wire)] = wire
            pos += len(wire)

    # -- write ---------------------------------------------------------------

    def write_object(self, mode: SecurityMode | str, source, key_id: int,
                     session: ServerSession | None = None) -> ObjectRef:
        """Encrypt and persist one object.

        KeyProtection: ``source`` is an untrusted plaintext buffer.
        EndToEnd: ``source`` is the client's record sequence (an iterable of
        wire records) and ``session`` the server session they belong to.
        """
        mode = SecurityMode(mode)
        untrusted = self.enclave.untrusted
        if mode is SecurityMode.KEY_PROTECTION:
            if not isinstance(source, UntrustedBuffer):
                raise TypeError("KeyProtection writes take an untrusted buffer")
            n = len(source)
            ct = untrusted.alloc(n)
            try:
                rec = self.engine.encrypt(key_id, source, header_aad(key_id, n), out=ct)
                return self._persist(key_id, rec)
            finally:
                ct.free()

        if session is None:
            raise ValueError("EndToEnd writes need a channel session")
        records = [bytes(r) for r in source]
        if any(len(r) < RECORD_OVERHEAD for r in records):
            raise RecordRejected("record too short")
        n = sum(len(r) - RECORD_OVERHEAD for r in records)
        self.engine._check_size(n)
        stream = untrusted.from_bytes(frame_records(records))
        ct = untrusted.alloc(n)
        try:
            iv, tag = self.enclave.call(self._h_write, stream, ct, session=session,
                                        key_id=key_id, payload_len=n)
            return self._persist(key_id, SealedRecord(iv, ct, tag, AAD_BYTES))
        finally:
            stream.free()
            ct.free()

    def _persist(self, key_id: int, rec: SealedRecord) -> ObjectRef:
        header = BlockHeader(key_id, len(rec.ciphertext), rec.iv, rec.tag)
        return self.store.put([header.pack(), rec.ciphertext.view])

    # -- read ----------------------------------------------------------------

    def _load(self, ref: ObjectRef, key_id: int) -> tuple[BlockHeader, bytes]:
        if not self.engine.has_key(key_id):
            raise UnknownKey(key_id)
        blob = self.store.get(ref)
        header = BlockHeader.unpack(blob)
        if len(blob) != HEADER_BYTES + header.payload_len:
            raise IntegrityError("block length does not match its header")
        if header.key_id != key_id:
            raise IntegrityError(f"block was written under key {header.key_id}, not {key_id}")
        return header, blob

    def read_object(self, mode: SecurityMode | str, ref: ObjectRef, key_id: int,
                    destination: UntrustedBuffer | None = None, session: ServerSession | None = None):
        """Load and decrypt one object.

        KeyProtection returns the plaintext in an untrusted buffer
        (``destination`` if given).  EndToEnd returns the list of server
        records carrying the payload re-encrypted for ``session``.
        """
        mode = SecurityMode(mode)
        header, blob = self._load(ref, key_id)
        n = header.payload_len
        untrusted = self.enclave.untrusted
        ct = untrusted.from_bytes(memoryview(blob)[HEADER_BYTES:])
        try:
            if mode is SecurityMode.KEY_PROTECTION:
                rec = SealedRecord(header.iv, ct, header.tag, AAD_BYTES)
                try:
                    return self.engine.decrypt(key_id, rec, header.aad(), out=destination)
                except AuthError as exc:
                    raise IntegrityError(f"stored block failed authentication: {exc}") from None

            if session is None:
                raise ValueError("EndToEnd reads need a channel session")
            nrec = max(1, -(-n // self.record_size))
            out = untrusted.alloc(n + nrec * (RECORD_OVERHEAD + _FRAME.size))
            try:
                try:
                    self.enclave.call(self._h_read, ct, out, session=session, key_id=key_id,
                                      iv=header.iv, tag=header.tag, aad=header.aad())
                except AuthError as exc:
                    raise IntegrityError(f"stored block failed authentication: {exc}") from None
                return [bytes(r) for r in unframe_records(out.view)]
            finally:
                out.free()
        finally:
            ct.free()


def _pieces(n: int, size: int):
    if n == 0:
        yield slice(0, 0)
        return
    for off in range(0, n, size):
        yield slice(off, min(n, off + size))
