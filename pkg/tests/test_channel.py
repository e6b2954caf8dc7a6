import os
import struct

import pytest
from hypothesis import given, settings, strategies as st

from sgx_datapath.boundary import Enclave
from sgx_datapath.channel import (
    LABEL,
    RECORD_OVERHEAD,
    ChannelClient,
    ChannelServer,
    decode_hello,
    encode_hello,
)
from sgx_datapath.emulator import MiB, EpcRegion
from sgx_datapath.errors import HandshakeError, RecordRejected

# encodings that are the identity or of small order on Curve25519
LOW_ORDER = [
    "00" * 32,
    "01" + "00" * 31,
    "e0eb7a7c3b41b8ae1656e3faf19fc46ada098deb9c32b1fd866205165f49b800",
    "ec" + "ff" * 30 + "7f",
    "ed" + "ff" * 30 + "7f",
    "ee" + "ff" * 30 + "7f",
]


@pytest.fixture
def setup():
    enclave = Enclave()
    server = ChannelServer(enclave)
    client = ChannelClient()
    reply, session = server.handshake(client.hello())
    return enclave, server, client.finish(reply), session


def server_keys(session):
    return session._keys.read()


def test_label_is_fixed():
    assert LABEL == b"enclave-datapath v1"


def test_hello_wire_format():
    pub = os.urandom(32)
    msg = encode_hello(pub)
    assert msg[:2] == b"\x00\x20" and msg[2:] == pub
    assert decode_hello(msg) == pub
    for bad in [b"", b"\x00", b"\x00\x20" + pub[:31], b"\x00\x21" + pub + b"x"]:
        with pytest.raises(HandshakeError):
            decode_hello(bad)


def test_both_ends_derive_identical_keys(setup):
    enclave, server, cs, session = setup
    assert server_keys(session) == cs.send_key + cs.recv_key
    assert cs.send_key != cs.recv_key and len(cs.send_key) == 16


def test_two_handshakes_give_distinct_keys():
    server = ChannelServer(Enclave())
    keys = set()
    for _ in range(50):
        client = ChannelClient()
        reply, session = server.handshake(client.hello())
        keys.add(client.finish(reply).send_key)
    assert len(keys) == 50
    assert len(server.sessions) == 50


def test_server_session_keys_stay_inside(setup):
    enclave, server, cs, session = setup
    assert not enclave.untrusted.scan(cs.send_key)
    assert not enclave.untrusted.scan(cs.recv_key)


@pytest.mark.parametrize("point", LOW_ORDER)
def test_low_order_client_point_rejected(point):
    enclave = Enclave()
    server = ChannelServer(enclave)
    with pytest.raises(HandshakeError):
        server.handshake(encode_hello(bytes.fromhex(point)))
    assert not server.sessions
    assert enclave.epc.allocated_bytes == 0


@pytest.mark.parametrize("point", LOW_ORDER[:3])
def test_low_order_server_point_rejected_by_client(point):
    with pytest.raises(HandshakeError):
        ChannelClient().finish(encode_hello(bytes.fromhex(point)))


def test_malformed_hello_rejected():
    server = ChannelServer(Enclave())
    with pytest.raises(HandshakeError):
        server.handshake(b"\x00\x10" + bytes(16))


def test_record_wire_format(setup):
    enclave, server, cs, session = setup
    rec = cs.send(b"hello")
    assert len(rec) == 5 + RECORD_OVERHEAD == 5 + 36
    assert struct.unpack(">Q", rec[:8])[0] == 0
    assert struct.unpack(">Q", cs.send(b"x")[:8])[0] == 1


def test_64k_round_trip_into_enclave_region(setup):
    enclave, server, cs, session = setup
    payload = os.urandom(64 * 1024)
    region = server.trusted_recv(session, enclave.untrusted.from_bytes(cs.send(payload)))
    assert isinstance(region, EpcRegion) and region.arena is enclave.epc
    assert region.read() == payload
    assert not enclave.untrusted.scan(payload[:16])
    assert not enclave.untrusted.scan_windows([payload])


def test_empty_payload_gives_no_region(setup):
    enclave, server, cs, session = setup
    assert server.trusted_recv(session, enclave.untrusted.from_bytes(cs.send(b""))) is None


def test_replay_and_reorder_rejected(setup):
    enclave, server, cs, session = setup
    r0, r1, r2 = (enclave.untrusted.from_bytes(cs.send(os.urandom(100))) for _ in range(3))
    server.trusted_recv(session, r0)
    with pytest.raises(RecordRejected):
        server.trusted_recv(session, r0)
    with pytest.raises(RecordRejected):
        server.trusted_recv(session, r2)
    # rejected records do not advance the counter
    assert server.trusted_recv(session, r1) is not None
    assert server.trusted_recv(session, r2) is not None


def test_resequenced_record_rejected(setup):
    enclave, server, cs, session = setup
    first = cs.send(b"payload" * 4)
    server.trusted_recv(session, enclave.untrusted.from_bytes(first))
    # an old record relabelled with the expected sequence number: AAD and IV no longer match
    rec = bytearray(first)
    rec[:8] = struct.pack(">Q", 1)
    with pytest.raises(RecordRejected):
        server.trusted_recv(session, enclave.untrusted.from_bytes(bytes(rec)))


def test_record_from_other_session_rejected(setup):
    enclave, server, cs, session = setup
    other = ChannelClient()
    reply, _ = server.handshake(other.hello())
    stray = other.finish(reply).send(b"x" * 32)
    with pytest.raises(RecordRejected):
        server.trusted_recv(session, enclave.untrusted.from_bytes(stray))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 8 * 64 - 1))
def test_any_single_bit_flip_rejected(bit):
    enclave = Enclave()
    server = ChannelServer(enclave)
    client = ChannelClient()
    reply, session = server.handshake(client.hello())
    rec = client.finish(reply).send(os.urandom(64 - RECORD_OVERHEAD))
    bad = bytearray(rec)
    bad[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(RecordRejected):
        server.trusted_recv(session, enclave.untrusted.from_bytes(bytes(bad)))
    assert server.trusted_recv(session, enclave.untrusted.from_bytes(rec)) is not None


def test_server_to_client_direction(setup):
    enclave, server, cs, session = setup
    region = enclave.epc.alloc(1000)
    payload = os.urandom(1000)
    region.write(payload)
    wire = server.trusted_send(session, region)
    assert cs.recv(wire.tobytes()) == payload
    with pytest.raises(RecordRejected):
        cs.recv(wire.tobytes())


@pytest.mark.parametrize("size", [1, 17, 4096, MiB + 3, 8 * MiB])
def test_round_trip_sizes(setup, size):
    enclave, server, cs, session = setup
    payload = os.urandom(size)
    got = bytearray()
    for rec in cs.send_stream(payload, record_size=MiB):
        region = server.trusted_recv(session, enclave.untrusted.from_bytes(rec))
        got += region.read()
        region.free()
    assert bytes(got) == payload


@settings(max_examples=20, deadline=None)
@given(st.lists(st.binary(min_size=16, max_size=3000), min_size=1, max_size=6))
def test_no_payload_window_reaches_untrusted(payloads):
    enclave = Enclave()
    server = ChannelServer(enclave)
    client = ChannelClient()
    reply, session = server.handshake(client.hello())
    cs = client.finish(reply)
    for p in payloads:
        rec = enclave.untrusted.from_bytes(cs.send(p))
        assert server.trusted_recv(session, rec).read() == p
    assert not enclave.untrusted.scan_windows(payloads)
