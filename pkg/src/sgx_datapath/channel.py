"""A small secure channel whose server end terminates inside the enclave.

One round trip of anonymous ephemeral X25519 followed by HKDF-SHA256 gives a
key per direction.  Records are AES-128-GCM with the sequence number as AAD.

Wire formats::

    hello  = len (2, big-endian) || X25519 public key (32)
    record = seq (8, big-endian) || iv (12) || ciphertext || tag (16)

The record IV is a 4-byte direction label followed by the sequence number, so
the two directions never share an IV even though both start at sequence 0.
"""

from __future__ import annotations

import secrets
import struct
import threading

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .boundary import BufferPlacement as P
from .boundary import Enclave
from .emulator import EpcRegion, MiB, UntrustedBuffer
from .errors import HandshakeError, RecordRejected

LABEL = b"enclave-datapath v1"
PUBLIC_BYTES = 32
SEQ_BYTES = 8
IV_BYTES = 12
TAG_BYTES = 16
RECORD_OVERHEAD = SEQ_BYTES + IV_BYTES + TAG_BYTES
CLIENT_TO_SERVER = 1
SERVER_TO_CLIENT = 2


def encode_hello(public: bytes) -> bytes:
    return struct.pack(">H", len(public)) + public


def decode_hello(msg) -> bytes:
    msg = bytes(msg)
    if len(msg) < 2:
        raise HandshakeError("truncated hello")
    (n,) = struct.unpack(">H", msg[:2])
    if n != PUBLIC_BYTES or len(msg) != 2 + n:
        raise HandshakeError(f"hello must carry a {PUBLIC_BYTES}-byte public key")
    return msg[2:]


def derive_keys(private: X25519PrivateKey, peer_public: bytes, client_public: bytes,
                server_public: bytes) -> tuple[bytes, bytes]:
    """Return (client_to_server, server_to_client) 128-bit keys."""
    try:
        shared = private.exchange(X25519PublicKey.from_public_bytes(peer_public))
    except ValueError as exc:  # low-order point gives an all-zero secret
        raise HandshakeError(f"invalid peer public key: {exc}") from None
    okm = HKDF(algorithm=hashes.SHA256(), length=32, salt=client_public + server_public,
               info=LABEL).derive(shared)
    return okm[:16], okm[16:]


def record_iv(direction: int, seq: int) -> bytes:
    return struct.pack(">IQ", direction, seq)


class _Direction:
    """Sequence state and cipher for one direction of a session."""

    def __init__(self, key: bytes, direction: int):
        self._aead = AESGCM(key)
        self._dir = direction
        self._seq = 0
        self._lock = threading.Lock()

    def seal(self, plaintext) -> bytes:
        with self._lock:
            seq = self._seq
            self._seq += 1
        hdr = struct.pack(">Q", seq)
        iv = record_iv(self._dir, seq)
        return hdr + iv + self._aead.encrypt(iv, bytes(plaintext), hdr)

    def open(self, wire) -> bytes:
        wire = memoryview(wire).cast("B")
        if len(wire) < RECORD_OVERHEAD:
            raise RecordRejected("record too short")
        hdr = bytes(wire[:SEQ_BYTES])
        (seq,) = struct.unpack(">Q", hdr)
        iv = bytes(wire[SEQ_BYTES:SEQ_BYTES + IV_BYTES])
        with self._lock:
            if seq != self._seq:
                raise RecordRejected(f"sequence {seq}, expected {self._seq}")
            if iv != record_iv(self._dir, seq):
                raise RecordRejected("iv does not match sequence")
            try:
                plain = self._aead.decrypt(iv, bytes(wire[SEQ_BYTES + IV_BYTES:]), hdr)
            except InvalidTag:
                raise RecordRejected("record failed authentication") from None
            self._seq += 1
        return plain


def split_payload(data, record_size: int):
    data = memoryview(data).cast("B")
    if record_size <= 0:
        raise ValueError("record_size must be positive")
    if not len(data):
        yield data
        return
    for off in range(0, len(data), record_size):
        yield data[off:off + record_size]


# ---------------------------------------------------------------------------
# client (untrusted side)


class ChannelClient:
    def __init__(self):
        self._private = X25519PrivateKey.generate()
        self.public = self._private.public_key().public_bytes_raw()

    def hello(self) -> bytes:
        return encode_hello(self.public)

    def finish(self, server_hello) -> "ClientSession":
        server_public = decode_hello(server_hello)
        c2s, s2c = derive_keys(self._private, server_public, self.public, server_public)
        return ClientSession(self.public, server_public, c2s, s2c)


class ClientSession:
    def __init__(self, client_public: bytes, server_public: bytes, send_key: bytes, recv_key: bytes):
        self.client_public = client_public
        self.server_public = server_public
        self.send_key = send_key
        self.recv_key = recv_key
        self._out = _Direction(send_key, CLIENT_TO_SERVER)
        self._in = _Direction(recv_key, SERVER_TO_CLIENT)

    def send(self, plaintext) -> bytes:
        return self._out.seal(plaintext)

    def send_stream(self, data, record_size: int = MiB) -> list[bytes]:
        """Split ``data`` into records; an empty payload still yields one record."""
        return [self._out.seal(piece) for piece in split_payload(data, record_size)]

    def recv(self, record) -> bytes:
        return self._in.open(record)


# ---------------------------------------------------------------------------
# server (enclave side)


class ServerSession:
    """Server end of a session.  Its keys and sequence state are enclave-private.

    The ``open_record``/``seal_record`` methods are trusted-side helpers for
    other trusted functions; untrusted code uses :meth:`ChannelServer.trusted_recv`
    and :meth:`ChannelServer.trusted_send`.
    """

    def __init__(self, session_id: int, client_public: bytes, server_public: bytes,
                 key_region: EpcRegion, c2s: bytes, s2c: bytes):
        self.session_id = session_id
        self.client_public = client_public
        self.server_public = server_public
        self._keys = key_region
        self._in = _Direction(c2s, CLIENT_TO_SERVER)
        self._out = _Direction(s2c, SERVER_TO_CLIENT)

    def open_record(self, wire) -> bytes:
        return self._in.open(wire)

    def seal_record(self, plaintext) -> bytes:
        return self._out.seal(plaintext)

    def close(self):
        if self._keys is not None:
            self._keys.free()
            self._keys = None


class ChannelServer:
    def __init__(self, enclave: Enclave, name: str = "channel"):
        self.enclave = enclave
        self.sessions: dict[int, ServerSession] = {}
        self._lock = threading.Lock()
        reg = enclave.register_call
        self._h_handshake = reg(f"{name}.handshake", [("client_hello", P.COPY_IN),
                                                      ("server_hello", P.COPY_OUT)], self._t_handshake)
        self._h_recv = reg(f"{name}.recv", [("record", P.ACCESS_IN_PLACE)], self._t_recv)
        self._h_send = reg(f"{name}.send", [("payload", P.ENCLAVE_LOCAL),
                                            ("record", P.ACCESS_IN_PLACE)], self._t_send)

    def _t_handshake(self, hello: EpcRegion, out: EpcRegion) -> int:
        client_public = decode_hello(hello.read())
        private = X25519PrivateKey.generate()
        server_public = private.public_key().public_bytes_raw()
        c2s, s2c = derive_keys(private, client_public, client_public, server_public)
        region = self.enclave.epc.alloc(32)
        region.write(c2s + s2c)
        with self._lock:
            while True:
                sid = secrets.randbits(64)
                if sid not in self.sessions:
                    break
            self.sessions[sid] = ServerSession(sid, client_public, server_public, region, c2s, s2c)
        out.write(encode_hello(server_public))
        return sid

    def handshake(self, client_hello) -> tuple[bytes, ServerSession]:
        """Run the server side of the handshake inside the enclave."""
        untrusted = self.enclave.untrusted
        msg = bytes(client_hello)
        if len(msg) != 2 + PUBLIC_BYTES:
            # the CopyIn buffer must be nonempty and the reply has a fixed size
            raise HandshakeError("malformed client hello")
        hello_buf = untrusted.from_bytes(msg)
        out = untrusted.alloc(2 + PUBLIC_BYTES)
        try:
            sid = self.enclave.call(self._h_handshake, hello_buf, out)
            return out.tobytes(), self.sessions[sid]
        finally:
            hello_buf.free()
            out.free()

    def _t_recv(self, record: memoryview, session: ServerSession) -> EpcRegion | None:
        plain = session.open_record(record)
        if not plain:
            return None
        region = self.enclave.epc.alloc(len(plain))
        region.write(plain)
        return region

    def trusted_recv(self, session: ServerSession, record: UntrustedBuffer) -> EpcRegion | None:
        """Open a client record into a fresh enclave region (``None`` for an empty payload)."""
        return self.enclave.call(self._h_recv, record, session=session)

    def _t_send(self, payload: EpcRegion, out: memoryview, session: ServerSession):
        wire = session.seal_record(payload.read())
        out[:len(wire)] = wire

    def trusted_send(self, session: ServerSession, payload: EpcRegion) -> UntrustedBuffer:
        """Seal an enclave region as a server record in a new untrusted buffer."""
        out = self.enclave.untrusted.alloc(len(payload) + RECORD_OVERHEAD)
        self.enclave.call(self._h_send, payload, out, session=session)
        return out
