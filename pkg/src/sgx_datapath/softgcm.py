"""Software AES-128-GCM on numpy.

Used as the "portable" cipher backend, standing in for a crypto library built
without AES instructions.  The S-box is computed arithmetically (inversion in
GF(2^8) followed by the affine map) and GHASH multiplies bit-serially with
masks, so no table is ever indexed by secret data.  Blocks are processed in
vectorized batches: CTR over all counter blocks of a chunk at once, GHASH over
a chunk as a sum of products with precomputed powers of the hash key.

Python cannot promise constant-time execution; what this module does promise
is that the sequence of numpy operations does not depend on key or data.
"""

from __future__ import annotations

import numpy as np
from cryptography.exceptions import InvalidTag

_ONES = 0x0101010101010101
_LOW7 = 0x7F7F7F7F7F7F7F7F
_FULL = 0xFFFFFFFFFFFFFFFF
_R = 0xE100000000000000  # GHASH reduction constant, high word

_GHASH_BATCH = 4096  # blocks per vectorized GHASH step
_CTR_BATCH = 4096  # blocks per vectorized CTR step
_GHASH_SERIAL = 24  # below this many blocks, Horner's rule on ints is faster

# ShiftRows on the column-major state (byte 4c + r holds row r, column c)
_SHIFT_ROWS = np.array([4 * ((c + r) % 4) + r for c in range(4) for r in range(4)])


# -- GF(2^8) on eight bytes packed per uint64 ----------------------------------

def _xtime(a):
    return ((a & _LOW7) << 1) ^ (((a >> 7) & _ONES) * 0x1B)


def _gmul(a, b):
    r = a ^ a  # zero of the same kind; works for arrays and plain ints
    for _ in range(8):
        r ^= a & ((b & _ONES) * 0xFF)
        a = _xtime(a)
        b = b >> 1
    return r


def _gmul_scalar(a: int, b: int) -> int:
    r = 0
    for _ in range(8):
        if b & 1:
            r ^= a
        a = ((a << 1) ^ (0x1B if a & 0x80 else 0)) & 0xFF
        b >>= 1
    return r


# squaring is linear over GF(2): x^2 = xor of bit_i(x) * (2^i)^2
_SQ = [_gmul_scalar(1 << i, 1 << i) * _ONES for i in range(8)]


def _square(a):
    r = (a & _ONES) * (_SQ[0] // _ONES)
    for i in range(1, 8):
        r ^= ((a >> i) & _ONES) * (_SQ[i] // _ONES)
    return r


def _rotl_bytes(a, k):
    hi = (0xFF << k) & 0xFF
    lo = 0xFF >> (8 - k)
    return ((a << k) & (hi * _ONES)) | ((a >> (8 - k)) & (lo * _ONES))


def _sub_packed(x):
    """AES S-box applied to every byte of a packed uint64 array."""
    x2 = _square(x)
    x3 = _gmul(x2, x)
    x12 = _square(_square(x3))
    x15 = _gmul(x12, x3)
    x240 = _square(_square(_square(_square(x15))))
    x252 = _gmul(x240, x12)
    inv = _gmul(x252, x2)  # x^254, with 0 -> 0
    return (inv ^ _rotl_bytes(inv, 1) ^ _rotl_bytes(inv, 2) ^ _rotl_bytes(inv, 3)
            ^ _rotl_bytes(inv, 4) ^ (0x63 * _ONES))


def sub_bytes(data: np.ndarray) -> np.ndarray:
    """S-box over a uint8 array (any shape whose size is a multiple of 8)."""
    packed = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1).view(np.uint64)
    return _sub_packed(packed).view(np.uint8).reshape(data.shape)


# -- AES-128 ---------------------------------------------------------------

def expand_key(key: bytes) -> np.ndarray:
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes")
    w = [bytearray(key[4 * i:4 * i + 4]) for i in range(4)]
    rcon = 1
    for i in range(4, 44):
        t = bytearray(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            # the packed routines work on a plain int too, which is far cheaper for 4 bytes
            t = bytearray(_sub_packed(int.from_bytes(t, "little")).to_bytes(8, "little")[:4])
            t[0] ^= rcon
            rcon = ((rcon << 1) ^ (0x1B if rcon & 0x80 else 0)) & 0xFF
        w.append(bytearray(a ^ b for a, b in zip(w[i - 4], t)))
    return np.frombuffer(b"".join(w), dtype=np.uint8).reshape(11, 16).copy()


def _mix_columns(state: np.ndarray) -> np.ndarray:
    w = np.ascontiguousarray(state).view("<u4")
    r8 = (w >> 8) | (w << 24)
    r16 = (w >> 16) | (w << 16)
    r24 = (w >> 24) | (w << 8)
    u = w ^ r8
    xt = ((u & 0x7F7F7F7F) << 1) ^ (((u >> 7) & 0x01010101) * 0x1B)
    # b_r = a_r ^ (a0^a1^a2^a3) ^ xtime(a_r ^ a_r+1)
    return (r8 ^ r16 ^ r24 ^ xt).view(np.uint8).reshape(state.shape)


def encrypt_blocks(round_keys: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """AES-128 encryption of an (n, 16) uint8 array of blocks."""
    s = blocks ^ round_keys[0]
    for rnd in range(1, 11):
        s = sub_bytes(s)[:, _SHIFT_ROWS]
        if rnd != 10:
            s = _mix_columns(s)
        s ^= round_keys[rnd]
    return s


# -- GHASH -----------------------------------------------------------------

def _gf128_mul(xh, xl, yh, yl):
    """Elementwise product in GCM's GF(2^128); operands are (high, low) uint64 words."""
    zh = np.zeros_like(xh)
    zl = np.zeros_like(xl)
    vh = xh.copy()
    vl = xl.copy()
    tmp = np.empty_like(vh)
    for word in (yh, yl):
        for bit in range(63, -1, -1):
            m = ((word >> bit) & 1) * _FULL
            np.bitwise_and(vh, m, out=tmp)
            zh ^= tmp
            np.bitwise_and(vl, m, out=tmp)
            zl ^= tmp
            carry = (vl & 1) * _R
            vl >>= 1
            vl |= vh << 63
            vh >>= 1
            vh ^= carry
    return zh, zl


_R128 = _R << 64


def _gf128_mul_int(x: int, y: int) -> int:
    """Single product on Python ints, with masks instead of branches."""
    z = 0
    for i in range(127, -1, -1):
        z ^= x & -((y >> i) & 1)
        x = (x >> 1) ^ (_R128 & -(x & 1))
    return z


def _words(blocks: np.ndarray):
    be = np.ascontiguousarray(blocks).reshape(-1, 16).view(">u8")
    return be[:, 0].astype(np.uint64), be[:, 1].astype(np.uint64)


class _Ghash:
    def __init__(self, cipher: "SoftAESGCM"):
        self._cipher = cipher
        self._y = 0
        self._pending = b""

    def _absorb(self, blocks: np.ndarray):
        if len(blocks) < _GHASH_SERIAL:
            h = self._cipher.h
            y = self._y
            for b in blocks.reshape(-1, 16):
                y = _gf128_mul_int(y ^ int.from_bytes(b.tobytes(), "big"), h)
            self._y = y
            return
        for start in range(0, len(blocks), _GHASH_BATCH):
            part = blocks[start:start + _GHASH_BATCH]
            m = len(part)
            xh, xl = _words(part)
            xh[0] ^= np.uint64(self._y >> 64)
            xl[0] ^= np.uint64(self._y & _FULL)
            # Y' = sum_i X_i * H^(m - i), i = 0..m-1
            ph, pl = self._cipher.powers(m)
            zh, zl = _gf128_mul(xh, xl, ph[m - 1::-1], pl[m - 1::-1])
            self._y = (int(np.bitwise_xor.reduce(zh)) << 64) | int(np.bitwise_xor.reduce(zl))

    def update(self, data):
        data = bytes(data)
        if self._pending:
            data = self._pending + data
        full = len(data) - len(data) % 16
        if full:
            self._absorb(np.frombuffer(data, dtype=np.uint8, count=full).reshape(-1, 16))
        self._pending = data[full:]

    def pad(self):
        if self._pending:
            block = self._pending + bytes(16 - len(self._pending))
            self._pending = b""
            self._absorb(np.frombuffer(block, dtype=np.uint8).reshape(1, 16))

    def digest(self) -> bytes:
        return self._y.to_bytes(16, "big")


class SoftAESGCM:
    """AES-128-GCM with a 96-bit nonce; same call shapes as ``cryptography``'s AESGCM."""

    def __init__(self, key: bytes):
        self._rk = expand_key(bytes(key))
        self._h = None  # hash key E(K, 0); computed with the first keystream batch
        self._powers = None  # H^1 .. H^k, extended on demand

    @property
    def h(self) -> int:
        if self._h is None:
            self._set_h(encrypt_blocks(self._rk, np.zeros((1, 16), dtype=np.uint8)))
        return self._h

    def _set_h(self, block: np.ndarray):
        self._h = int.from_bytes(block.tobytes(), "big")

    def powers(self, m: int):
        if self._powers is None:
            h = self.h
            self._powers = (np.array([h >> 64], dtype=np.uint64), np.array([h & _FULL], dtype=np.uint64))
        ph, pl = self._powers
        while len(ph) < m:
            n = min(len(ph), _GHASH_BATCH - len(ph))
            top_h = np.full(n, ph[-1], dtype=np.uint64)
            top_l = np.full(n, pl[-1], dtype=np.uint64)
            nh, nl = _gf128_mul(ph[:n], pl[:n], top_h, top_l)
            ph = np.concatenate((ph, nh))
            pl = np.concatenate((pl, nl))
            self._powers = (ph, pl)
        return ph, pl

    def _j0(self, nonce) -> bytes:
        nonce = bytes(nonce)
        if len(nonce) != 12:
            raise ValueError("nonce must be 12 bytes")
        return nonce + b"\x00\x00\x00\x01"

    def _keystream(self, j0: bytes, offset: int, length: int, with_mask: bool = False):
        """Keystream bytes for ``[offset, offset+length)`` of the message.

        With ``with_mask`` the tag mask E(K, J0) is computed in the same batch
        and returned first.
        """
        first = offset // 16
        last = -(-(offset + length) // 16)
        extra = 1 if with_mask else 0
        want_h = with_mask and self._h is None
        n = last - first + extra
        ctr0 = int.from_bytes(j0[12:], "big") + 1 + first - extra
        blocks = np.empty((n + want_h, 16), dtype=np.uint8)
        blocks[:n, :12] = np.frombuffer(j0[:12], dtype=np.uint8)
        ctrs = (np.arange(n, dtype=np.uint64) + ctr0) & 0xFFFFFFFF
        blocks[:n, 12:] = ctrs.astype(">u4").view(np.uint8).reshape(n, 4)
        if want_h:
            # the hash key rides along as one more block in the same batch
            blocks[n] = 0
            n += 1
        ks = np.empty((n, 16), dtype=np.uint8)
        for s in range(0, n, _CTR_BATCH):
            ks[s:s + _CTR_BATCH] = encrypt_blocks(self._rk, blocks[s:s + _CTR_BATCH])
        if want_h:
            self._set_h(ks[-1])
        flat = ks.reshape(-1)
        skip = 16 * extra + offset - first * 16
        stream = flat[skip:skip + length]
        return (flat[:16], stream) if with_mask else stream

    def _mask(self, j0: bytes) -> np.ndarray:
        return encrypt_blocks(self._rk, np.frombuffer(j0, dtype=np.uint8).reshape(1, 16)).reshape(-1)

    @staticmethod
    def _lengths(aad_len: int, ct_len: int) -> bytes:
        return (8 * aad_len).to_bytes(8, "big") + (8 * ct_len).to_bytes(8, "big")

    def _ghash_once(self, aad: bytes, ct) -> np.ndarray:
        def pad(n):
            return bytes(-n % 16)
        gh = _Ghash(self)
        gh.update(b"".join((aad, pad(len(aad)), bytes(ct), pad(len(ct)),
                            self._lengths(len(aad), len(ct)))))
        return np.frombuffer(gh.digest(), dtype=np.uint8)

    def encryptor(self, nonce, aad=b"") -> "SoftGcmEncryptor":
        return SoftGcmEncryptor(self, self._j0(nonce), bytes(aad or b""))

    def encrypt(self, nonce, data, associated_data=None) -> bytes:
        pt = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
        aad = bytes(associated_data or b"")
        mask, ks = self._keystream(self._j0(nonce), 0, len(pt), with_mask=True)
        ct = (pt ^ ks).tobytes()
        return ct + (mask ^ self._ghash_once(aad, ct)).tobytes()

    def decrypt(self, nonce, data, associated_data=None) -> bytes:
        data = memoryview(data).cast("B")
        if len(data) < 16:
            raise InvalidTag()
        ct, tag = data[:-16], bytes(data[-16:])
        aad = bytes(associated_data or b"")
        mask, ks = self._keystream(self._j0(nonce), 0, len(ct), with_mask=True)
        expect = (mask ^ self._ghash_once(aad, ct)).tobytes()
        diff = 0
        for x, y in zip(expect, tag):
            diff |= x ^ y
        if diff:
            raise InvalidTag()
        return (np.frombuffer(ct, dtype=np.uint8) ^ ks).tobytes()


class SoftGcmEncryptor:
    """Streaming encryption; chunks of any length, in order."""

    def __init__(self, cipher: SoftAESGCM, j0: bytes, aad: bytes):
        self._c = cipher
        self._j0 = j0
        self._aad_len = len(aad)
        self._gh = _Ghash(cipher)
        self._gh.update(aad)
        self._gh.pad()
        self._pos = 0

    def update_into(self, src, dst) -> int:
        src = memoryview(src).cast("B")
        n = len(src)
        if not n:
            return 0
        ks = self._c._keystream(self._j0, self._pos, n)
        ct = np.frombuffer(src, dtype=np.uint8) ^ ks
        np.frombuffer(memoryview(dst).cast("B"), dtype=np.uint8, count=n)[:] = ct
        self._gh.update(ct.tobytes())
        self._pos += n
        return n

    def finalize(self) -> bytes:
        self._gh.pad()
        self._gh.update(self._c._lengths(self._aad_len, self._pos))
        s = np.frombuffer(self._gh.digest(), dtype=np.uint8)
        return (self._c._mask(self._j0) ^ s).tobytes()
