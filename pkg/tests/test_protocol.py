import random
import socket
import struct
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picluster import protocol as proto
from strategies import matvec_requests, messages, mutate, random_message


def test_ping_bytes():
    assert proto.encode(proto.Ping()) == bytes.fromhex("50 43 42 31 01 01 00 00 00 00")


def test_pi_response_payload_is_16_bytes():
    frame = proto.encode(proto.PiResponse(3.14, 10**6))
    assert len(frame) == proto.HEADER_SIZE + 16
    assert struct.unpack(">I", frame[6:10]) == (16,)


def test_pi_request_layout():
    frame = proto.encode(proto.PiRequest(samples=5, threads=2, base_seed=7, stream_base=65536))
    assert frame[:10] == b"PCB1\x01\x20" + (28).to_bytes(4, "big")
    assert frame[10:] == struct.pack(">QIQQ", 5, 2, 7, 65536)


def test_matvec_request_round_trip():
    req = proto.MatvecRequest(4, 2, 3, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [0.5, -1.0, 2.0])
    frame = proto.encode(req)
    assert len(frame) == proto.HEADER_SIZE + 12 + 8 * 9
    assert proto.decode(frame) == req
    assert proto.decode(frame).block().tolist() == [[1, 2, 3], [4, 5, 6]]


def test_error_reply_round_trip():
    msg = proto.ErrorReply(proto.ErrorCode.INVALID_ARGUMENT, "threads must be ≥ 1")
    assert proto.decode(proto.encode(msg)) == msg


@settings(max_examples=400)
@given(messages)
def test_round_trip(msg):
    frame = proto.encode(msg)
    assert proto.encode(msg) == frame
    assert proto.decode(frame) == msg


@given(st.lists(messages, max_size=8))
def test_concatenated_frames(msgs):
    stream = b"".join(proto.encode(m) for m in msgs)
    assert list(proto.iter_frames(stream)) == msgs


@given(matvec_requests(), matvec_requests())
def test_encode_injective(a, b):
    if a != b:
        assert proto.encode(a) != proto.encode(b)


def test_bad_magic():
    with pytest.raises(proto.BadMagic):
        proto.decode(b"XXXX\x01\x01\x00\x00\x00\x00")


def test_bad_version():
    with pytest.raises(proto.UnsupportedVersion):
        proto.decode(b"PCB1\x02\x01\x00\x00\x00\x00")


def test_unknown_type():
    with pytest.raises(proto.UnknownMessageType):
        proto.decode(b"PCB1\x01\x55\x00\x00\x00\x00")


def test_truncated_pi_response():
    frame = proto.encode(proto.PiResponse(3.0, 1))
    with pytest.raises(proto.Truncated):
        proto.decode(frame[: proto.HEADER_SIZE + 8])
    with pytest.raises(proto.Truncated):
        proto.decode(frame[:4])


def test_length_mismatch():
    frame = b"PCB1\x01\x21" + (8).to_bytes(4, "big") + bytes(8)
    with pytest.raises(proto.LengthMismatch):
        proto.decode(frame)
    ping_with_body = b"PCB1\x01\x01" + (1).to_bytes(4, "big") + b"\x00"
    with pytest.raises(proto.LengthMismatch):
        proto.decode(ping_with_body)
    # declares 1000x1000 but carries nothing: rejected without allocating
    huge = b"PCB1\x01\x10" + (12).to_bytes(4, "big") + struct.pack(">III", 0, 1000, 1000)
    with pytest.raises(proto.LengthMismatch):
        proto.decode(huge)


def test_error_reply_invalid_utf8():
    frame = b"PCB1\x01\x7f" + (3).to_bytes(4, "big") + b"\x00\x01\xff"
    with pytest.raises(proto.MalformedPayload):
        proto.decode(frame)


def test_payload_limit_checked_from_header():
    header = b"PCB1\x01\x11" + (2**31 + 1).to_bytes(4, "big")
    with pytest.raises(proto.PayloadTooLarge):
        proto.decode(header)
    with pytest.raises(proto.PayloadTooLarge):
        proto.parse_header(b"PCB1\x01\x11" + (100).to_bytes(4, "big"), max_payload=99)


def test_encode_errors():
    with pytest.raises(proto.EncodeError):
        proto.encode(proto.PiRequest(2**64, 1, 0, 0))
    with pytest.raises(proto.EncodeError):
        proto.encode(proto.PiRequest(1, -1, 0, 0))
    with pytest.raises(proto.EncodeError):
        proto.encode(proto.MatvecRequest(0, 2, 2, [1.0, 2.0, 3.0], [1.0, 2.0]))
    with pytest.raises(proto.EncodeError):
        proto.encode(proto.MatvecResponse(0, 2, [1.0]))
    with pytest.raises(proto.EncodeError):
        proto.encode("not a message")


def test_mutated_frames_raise_typed_errors():
    rnd = random.Random(1)
    for _ in range(2000):
        frame = proto.encode(random_message(rnd))
        bad = mutate(frame, rnd)
        try:
            proto.decode(bad)
        except proto.ProtocolError:
            pass


@given(st.binary(max_size=64))
def test_arbitrary_bytes_never_crash(data):
    try:
        proto.decode(data)
    except proto.ProtocolError:
        pass


def test_socket_helpers():
    a, b = socket.socketpair()
    with a, b:
        msgs = [proto.Ping(), proto.PiRequest(10, 2, 3, 4), proto.MatvecResponse(1, 2, [1.5, -2.5])]
        for m in msgs:
            proto.send_message(a, m)
        a.shutdown(socket.SHUT_WR)
        assert [proto.recv_message(b) for _ in msgs] == msgs
        assert proto.recv_message(b) is None


def test_recv_truncated_stream():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(proto.encode(proto.PiResponse(3.0, 1))[:-3])
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(proto.Truncated):
            proto.recv_message(b)


def test_recv_does_not_preallocate_lying_length():
    a, b = socket.socketpair()
    with a, b:
        # claims 2 GiB but sends a few bytes then closes
        a.sendall(b"PCB1\x01\x11" + (2**31).to_bytes(4, "big") + b"\x00" * 8)
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(proto.Truncated):
            proto.recv_message(b)


@pytest.mark.parametrize(
    "kind, params, bits",
    [
        ("model-pi-request", {"workers": 7}, 448),
        ("model-pi-response", {"workers": 7}, 448),
        ("model-pi-round-trip", {"workers": 7}, 896),
        ("model-matvec-task", {"rows": 3000, "cols": 3000}, 1_152_000_000),
        ("pi-request", {}, 224),
        ("pi-response", {}, 128),
        ("matvec-request", {"rows": 2, "cols": 3}, 96 + 64 * 9),
        ("matvec-response", {"rows": 5}, 64 + 64 * 5),
    ],
)
def test_payload_bits(kind, params, bits):
    assert proto.payload_bits(kind, **params) == bits


def test_payload_bits_live_kinds_match_encoded_size():
    req = proto.MatvecRequest(0, 3, 4, [0.0] * 12, [0.0] * 4)
    assert proto.payload_bits("matvec-request", rows=3, cols=4) == 8 * (len(proto.encode(req)) - proto.HEADER_SIZE)
    pi = proto.PiRequest(1, 1, 1, 1)
    assert proto.payload_bits("pi-request") == 8 * (len(proto.encode(pi)) - proto.HEADER_SIZE)


def test_payload_bits_errors():
    with pytest.raises(ValueError, match="unknown"):
        proto.payload_bits("carrier-pigeon")
    with pytest.raises(ValueError, match="workers"):
        proto.payload_bits("model-pi-request")


def _doc_block(after: str) -> bytes:
    text = (Path(__file__).parent.parent / "docs" / "protocol.md").read_text()
    block = text.split(after, 1)[1].split("```", 2)[1]
    hexdigits = [tok for line in block.splitlines() for tok in line.split() if len(tok) == 2]
    return bytes.fromhex("".join(hexdigits))


def test_documented_examples_match_encoder():
    assert _doc_block("PiRequest for worker 1") == proto.encode(proto.PiRequest(17142858, 4, 2017, 65536))
    assert _doc_block("PiResponse (") == proto.encode(proto.PiResponse(3.141592653589793, 17142858))
    assert _doc_block("MatvecRequest for rows") == proto.encode(
        proto.MatvecRequest(4, 2, 3, [1, 2, 3, 4, 5, 6], [0.5, -1, 2])
    )
    assert _doc_block("MatvecResponse with") == proto.encode(proto.MatvecResponse(4, 2, [4.5, 9.0]))
    assert _doc_block("ErrorReply, code 1") == proto.encode(proto.ErrorReply(1, "samples must be >= 1, got 0"))
