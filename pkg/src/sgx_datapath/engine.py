"""Trusted-side AES-128-GCM engine.

Keys are generated or installed inside the enclave arena and never leave it.
Data operations go through the call gate with either AccessInPlace buffers
(plaintext and ciphertext in general memory) or an EnclaveLocal plaintext
region.  Two interchangeable cipher backends are available: ``accelerated``
(OpenSSL through ``cryptography``) and ``portable`` (the numpy implementation
in :mod:`sgx_datapath.softgcm`).
"""

from __future__ import annotations

import enum
import itertools
import secrets
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .boundary import BufferPlacement as P
from .boundary import Enclave
from .emulator import EpcRegion, KiB, MiB, UntrustedBuffer
from .errors import AuthError, KeyInstallRejected, PlacementViolation, RecordRejected, UnknownKey
from .softgcm import SoftAESGCM

KEY_BYTES = 16
IV_BYTES = 12
TAG_BYTES = 16
RECORD_OVERHEAD = IV_BYTES + TAG_BYTES
DEFAULT_MAX_BYTES = 256 * MiB

Progress = Callable[[int], None]


class Backend(str, enum.Enum):
    ACCELERATED = "accelerated"
    PORTABLE = "portable"


@dataclass(frozen=True)
class SealedRecord:
    iv: bytes
    ciphertext: UntrustedBuffer
    tag: bytes
    aad_len: int

    def __len__(self):
        return len(self.ciphertext)


def make_iv(lane_id: int, counter: int) -> bytes:
    return struct.pack(">IQ", lane_id, counter)


def split_iv(iv: bytes) -> tuple[int, int]:
    return struct.unpack(">IQ", iv)


# ---------------------------------------------------------------------------
# cipher backends (trusted side)


class _AcceleratedCipher:
    one_shot_max = 64 * KiB
    chunk = MiB

    def __init__(self, key: bytes):
        self._key = key
        self._aead = AESGCM(key)

    def encrypt_into(self, iv: bytes, aad: bytes, src: Iterable[memoryview], length: int,
                     dst: memoryview, progress: Progress | None = None) -> bytes:
        views = list(src) if length <= self.one_shot_max else src
        if length <= self.one_shot_max and len(views) <= 1:
            out = self._aead.encrypt(iv, views[0] if views else b"", aad)
            dst[:length] = memoryview(out)[:length]
            if progress:
                progress(length)
            return out[length:]
        enc = Cipher(algorithms.AES(self._key), modes.GCM(iv)).encryptor()
        if aad:
            enc.authenticate_additional_data(aad)
        pos = 0
        for v in views:
            for off in range(0, len(v), self.chunk):
                piece = v[off:off + self.chunk]
                enc.update_into(piece, dst[pos:pos + len(piece)])
                pos += len(piece)
                if progress:
                    progress(len(piece))
        enc.finalize()
        return enc.tag

    def decrypt(self, iv: bytes, aad: bytes, ct: memoryview, tag: bytes) -> bytes:
        # one-shot: nothing is released before the tag has been checked
        try:
            return self._aead.decrypt(iv, bytes(ct) + tag, aad)
        except InvalidTag:
            raise AuthError("tag mismatch") from None


class _PortableCipher:
    one_shot_max = 64 * KiB
    chunk = 64 * KiB

    def __init__(self, key: bytes):
        self._aead = SoftAESGCM(key)

    def encrypt_into(self, iv, aad, src, length, dst, progress=None) -> bytes:
        views = list(src) if length <= self.one_shot_max else src
        if length <= self.one_shot_max and len(views) <= 1:
            out = self._aead.encrypt(iv, views[0] if views else b"", aad)
            dst[:length] = memoryview(out)[:length]
            if progress:
                progress(length)
            return out[length:]
        enc = self._aead.encryptor(iv, aad)
        pos = 0
        for v in views:
            for off in range(0, len(v), self.chunk):
                piece = v[off:off + self.chunk]
                enc.update_into(piece, dst[pos:pos + len(piece)])
                pos += len(piece)
                if progress:
                    progress(len(piece))
        return enc.finalize()

    def decrypt(self, iv, aad, ct, tag) -> bytes:
        try:
            return self._aead.decrypt(iv, bytes(ct) + tag, aad)
        except InvalidTag:
            raise AuthError("tag mismatch") from None


_CIPHERS = {Backend.ACCELERATED: _AcceleratedCipher, Backend.PORTABLE: _PortableCipher}


def seal(backend: Backend | str, key: bytes, iv: bytes, plaintext, aad: bytes = b"") -> tuple[bytes, bytes]:
    """Stateless AES-128-GCM encryption with an explicit IV; returns (ciphertext, tag).

    Intended for known-answer and equivalence testing of the backends.
    """
    cipher = _CIPHERS[Backend(backend)](bytes(key))
    src = memoryview(plaintext).cast("B")
    dst = bytearray(len(src))
    tag = cipher.encrypt_into(bytes(iv), bytes(aad), [src] if len(src) else [], len(src), memoryview(dst))
    return bytes(dst), bytes(tag)


# ---------------------------------------------------------------------------
# engine


class _Key:
    __slots__ = ("region", "cipher")

    def __init__(self, region: EpcRegion, cipher):
        self.region = region
        self.cipher = cipher


class CryptoEngine:
    """AES-128-GCM engine whose keys and key schedule live on the trusted side.

    Every public data operation is exactly one gate transition.  IVs are the
    32-bit lane of the calling thread followed by that lane's 64-bit counter.
    """

    def __init__(self, enclave: Enclave, backend: Backend | str = Backend.ACCELERATED,
                 max_bytes: int = DEFAULT_MAX_BYTES, name: str | None = None):
        self.enclave = enclave
        self.backend = Backend(backend)
        self.max_bytes = max_bytes
        self.name = name or self.backend.value
        self._cipher_cls = _CIPHERS[self.backend]
        self._keys: dict[int, _Key] = {}
        self._keys_lock = threading.Lock()
        self._lanes = itertools.count()
        self._local = threading.local()

        reg = enclave.register_call
        n = self.name
        self._h_generate = reg(f"{n}.generate_key", [("key_id", P.COPY_OUT)], self._t_generate)
        self._h_install = reg(f"{n}.install_key", [("wrapped", P.COPY_IN), ("key_id", P.COPY_OUT)],
                              self._t_install)
        self._h_enc_in_place = reg(f"{n}.encrypt_in_place",
                                   [("plaintext", P.ACCESS_IN_PLACE), ("ciphertext", P.ACCESS_IN_PLACE)],
                                   self._t_encrypt)
        self._h_enc_local = reg(f"{n}.encrypt_local",
                                [("plaintext", P.ENCLAVE_LOCAL), ("ciphertext", P.ACCESS_IN_PLACE)],
                                self._t_encrypt)
        self._h_dec_in_place = reg(f"{n}.decrypt_in_place",
                                   [("ciphertext", P.ACCESS_IN_PLACE), ("plaintext", P.ACCESS_IN_PLACE)],
                                   self._t_decrypt)
        self._h_dec_local = reg(f"{n}.decrypt_local",
                                [("ciphertext", P.ACCESS_IN_PLACE), ("plaintext", P.ENCLAVE_LOCAL)],
                                self._t_decrypt)

    # -- key table ---------------------------------------------------------

    def _store_key(self, material: bytes) -> int:
        region = self.enclave.epc.alloc(KEY_BYTES)
        region.write(material)
        with self._keys_lock:
            while True:
                kid = secrets.randbits(32)
                if kid not in self._keys:
                    break
            self._keys[kid] = _Key(region, self._cipher_cls(material))
        return kid

    def _key(self, key_id: int) -> _Key:
        try:
            return self._keys[key_id]
        except KeyError:
            raise UnknownKey(key_id) from None

    def has_key(self, key_id: int) -> bool:
        return key_id in self._keys

    def key_ids(self) -> list[int]:
        with self._keys_lock:
            return list(self._keys)

    def destroy_key(self, key_id: int):
        with self._keys_lock:
            entry = self._keys.pop(key_id, None)
        if entry is None:
            raise UnknownKey(key_id)
        entry.region.free()

    # -- trusted functions ---------------------------------------------------

    def _t_generate(self, out: EpcRegion):
        kid = self._store_key(secrets.token_bytes(KEY_BYTES))
        out.write(struct.pack("<I", kid))

    def _t_install(self, wrapped: EpcRegion, out: EpcRegion, session=None):
        if session is None:
            raise KeyInstallRejected("no channel session")
        try:
            material = session.open_record(wrapped.read())
        except RecordRejected as exc:
            raise KeyInstallRejected(str(exc)) from None
        if len(material) != KEY_BYTES:
            raise KeyInstallRejected(f"expected a {KEY_BYTES}-byte key, got {len(material)} bytes")
        out.write(struct.pack("<I", self._store_key(bytes(material))))

    def _next_iv(self) -> bytes:
        loc = self._local
        try:
            ctr = next(loc.counter)
        except AttributeError:
            lane = loc.lane = next(self._lanes)
            if lane >= 1 << 32:
                raise RuntimeError("lane ids exhausted") from None
            loc.counter = itertools.count()
            ctr = next(loc.counter)
        if ctr >= 1 << 64:
            raise RuntimeError("iv counter exhausted for this lane")
        return make_iv(loc.lane, ctr)

    def trusted_encrypt(self, key_id: int, src: Iterable[memoryview], length: int, dst: memoryview,
                        aad: bytes = b"", progress: Progress | None = None) -> tuple[bytes, bytes]:
        """Encrypt from inside the enclave (no transition).  Returns (iv, tag)."""
        cipher = self._key(key_id).cipher
        iv = self._next_iv()
        tag = cipher.encrypt_into(iv, aad, src, length, dst, progress)
        return iv, bytes(tag)

    def trusted_decrypt(self, key_id: int, iv: bytes, ct, tag: bytes, aad: bytes = b"") -> bytes:
        """Verify and decrypt from inside the enclave; the result is trusted scratch."""
        return self._key(key_id).cipher.decrypt(iv, aad, ct, tag)

    def _t_encrypt(self, src, dst: memoryview, key_id: int, aad: bytes, progress: Progress | None):
        n = len(src)
        if isinstance(src, EpcRegion):
            views = src.views() if n > self._cipher_cls.one_shot_max else list(src.views())
        else:
            views = [src] if n else []
        cipher = self._key(key_id).cipher
        iv = self._next_iv()
        return iv, bytes(cipher.encrypt_into(iv, aad, views, n, dst, progress))

    def _t_decrypt(self, ct: memoryview, dst, key_id: int, iv: bytes, tag: bytes, aad: bytes):
        plain = self.trusted_decrypt(key_id, iv, ct, tag, aad)
        if isinstance(dst, EpcRegion):
            if len(plain):
                dst.write(plain)
        else:
            dst[:len(plain)] = plain

    # -- public API (untrusted side) ----------------------------------------

    def generate_key(self) -> int:
        out = self.enclave.untrusted.alloc(4)
        try:
            self.enclave.call(self._h_generate, out)
            return struct.unpack("<I", out.view)[0]
        finally:
            out.free()

    def install_key(self, wrapped: UntrustedBuffer | bytes, session) -> int:
        """Install a key delivered as a channel record over ``session``."""
        untrusted = self.enclave.untrusted
        owned = not isinstance(wrapped, UntrustedBuffer)
        buf = untrusted.from_bytes(wrapped) if owned else wrapped
        out = untrusted.alloc(4)
        try:
            self.enclave.call(self._h_install, buf, out, session=session)
            return struct.unpack("<I", out.view)[0]
        finally:
            out.free()
            if owned:
                buf.free()

    def _check_size(self, n: int):
        if n > self.max_bytes:
            raise ValueError(f"buffer of {n} bytes exceeds the {self.max_bytes}-byte limit")

    def encrypt(self, key_id: int, plaintext: UntrustedBuffer | EpcRegion, aad: bytes = b"",
                out: UntrustedBuffer | None = None, progress: Progress | None = None) -> SealedRecord:
        """Encrypt ``plaintext`` into an untrusted ciphertext buffer.

        ``plaintext`` selects the placement: an :class:`UntrustedBuffer` is used
        in place, an :class:`EpcRegion` is EnclaveLocal.  ``out`` must have the
        plaintext's length; one is allocated if omitted.  ``progress`` is called
        from inside the enclave with the byte count of each processed chunk.
        """
        if isinstance(plaintext, EpcRegion):
            handle = self._h_enc_local
        elif isinstance(plaintext, UntrustedBuffer):
            handle = self._h_enc_in_place
        else:
            raise PlacementViolation("plaintext must be an untrusted buffer or an enclave region")
        n = len(plaintext)
        if n > self.max_bytes:
            self._check_size(n)
        if key_id not in self._keys:
            raise UnknownKey(key_id)
        if type(aad) is not bytes:
            aad = bytes(aad)
        if out is None:
            out = self.enclave.untrusted.alloc(n)
        elif len(out) != n:
            raise ValueError("output buffer length must equal plaintext length")
        iv, tag = self.enclave.call(handle, plaintext, out, key_id=key_id, aad=aad, progress=progress)
        return SealedRecord(iv, out, tag, len(aad))

    def decrypt(self, key_id: int, record: SealedRecord, aad: bytes = b"",
                out: UntrustedBuffer | EpcRegion | None = None):
        """Verify and decrypt ``record``; nothing is written to ``out`` on failure."""
        n = len(record.ciphertext)
        self._check_size(n)
        if not self.has_key(key_id):
            raise UnknownKey(key_id)
        aad = bytes(aad)
        if len(aad) != record.aad_len:
            raise AuthError("associated data length does not match the record")
        owned = out is None
        if owned:
            out = self.enclave.untrusted.alloc(n)
        elif len(out) != n:
            raise ValueError("output length must equal ciphertext length")
        handle = self._h_dec_local if isinstance(out, EpcRegion) else self._h_dec_in_place
        try:
            self.enclave.call(handle, record.ciphertext, out, key_id=key_id, iv=bytes(record.iv),
                              tag=bytes(record.tag), aad=aad)
        except BaseException:
            if owned:
                out.free()
            raise
        return out
